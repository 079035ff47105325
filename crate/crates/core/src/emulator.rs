//! Emulated QKD device pairs over lossy fibers and per-node optical switches.
//!
//! Each device pair produces synchronized 256-bit key blocks at a
//! loss-dependent secret bit rate and reports one monitoring sample per
//! step. Key material is derived deterministically from the scenario seed,
//! the link id, and a running block index, so both endpoint KMEs can be fed
//! identical blocks without a synchronization channel; this stands in for
//! the QKD protocol itself, which is out of scope here.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;
use uuid::Uuid;

use crate::kme::KeyBlock;

pub const BLOCK_BITS: f64 = 256.0;
pub const DEFAULT_RESYNC_DELAY_S: u64 = 30;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EmuError {
    #[error("unknown switch {0}")]
    UnknownSwitch(String),
    #[error("unknown port {port} on switch {switch}")]
    UnknownPort { switch: String, port: String },
    #[error("unknown fiber {0}")]
    UnknownFiber(String),
    #[error("fiber {fiber} already attached to port {port}")]
    FiberBusy { fiber: String, port: String },
    #[error("unknown link {0}")]
    UnknownLink(String),
    #[error("link {0} already exists")]
    DuplicateLink(String),
    #[error("node {0} has no switch")]
    NoSwitchForNode(String),
}

/// A physical fiber span with a fixed loss budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Fiber {
    pub fiber_id: String,
    pub endpoints: (String, String),
    pub loss_db: f64,
    pub operational: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkStatus {
    Running,
    Down,
    Switching,
}

impl LinkStatus {
    pub fn name(&self) -> &'static str {
        match self {
            LinkStatus::Running => "RUNNING",
            LinkStatus::Down => "DOWN",
            LinkStatus::Switching => "SWITCHING",
        }
    }
}

/// One endpoint of a device pair: the hosting node and its switch port.
pub type EndpointPort = (String, String);

#[derive(Debug, Clone)]
pub struct QkdDevicePair {
    pub link_id: String,
    pub endpoints: (String, String),
    pub ports: (EndpointPort, EndpointPort),
    pub base_rate_bps: f64,
    pub status: LinkStatus,
    bit_accum: f64,
    blocks_emitted: u64,
    switching_until: Option<u64>,
    last_series: String,
    qber_rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct OpticalSwitch {
    pub switch_id: String,
    pub node_id: String,
    pub ports: Vec<String>,
    pub cross_connects: BTreeMap<String, String>,
}

/// Timestamped telemetry for one link, keyed by the optical line it
/// currently occupies.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitoringSample {
    /// Series identifier: the fiber the pair is attached to.
    pub link_id: String,
    /// The device pair the sample belongs to.
    pub pair_id: String,
    /// Seconds since scenario start.
    pub timestamp: u64,
    pub sbr_bps: f64,
    pub qber: f64,
    pub status: LinkStatus,
}

/// Secret bit rate under exponential fiber attenuation:
/// `base_rate_bps * 10^(-loss_db / 10)`.
pub fn sbr_model(base_rate_bps: f64, loss_db: f64) -> f64 {
    base_rate_bps * 10f64.powf(-loss_db / 10.0)
}

/// QBER model parameters: linear in loss with bounded uniform jitter.
#[derive(Debug, Clone, Copy)]
pub struct QberParams {
    pub base: f64,
    pub slope_per_db: f64,
    pub jitter_amp: f64,
    pub clamp_max: f64,
}

impl Default for QberParams {
    fn default() -> Self {
        QberParams { base: 0.02, slope_per_db: 0.002, jitter_amp: 0.003, clamp_max: 0.12 }
    }
}

/// QBER for a given loss; `jitter_draw` is a uniform draw in [-1, 1].
pub fn qber_model(loss_db: f64, jitter_draw: f64, params: &QberParams) -> f64 {
    let q = params.base + params.slope_per_db * loss_db + params.jitter_amp * jitter_draw;
    q.clamp(0.0, params.clamp_max)
}

#[derive(Debug)]
pub struct StepOutcome {
    pub blocks: Vec<KeyBlock>,
    pub sample: MonitoringSample,
}

/// Deterministically derives block `index` of `link_id` for a scenario seed.
pub fn derive_block(seed: u64, link_id: &str, index: u64) -> KeyBlock {
    let mut hasher = Sha256::new();
    hasher.update(b"key-material");
    hasher.update(seed.to_le_bytes());
    hasher.update(link_id.as_bytes());
    hasher.update(index.to_le_bytes());
    let material = hasher.finalize().to_vec();

    let mut id_hasher = Sha256::new();
    id_hasher.update(b"key-id");
    id_hasher.update(seed.to_le_bytes());
    id_hasher.update(link_id.as_bytes());
    id_hasher.update(index.to_le_bytes());
    let digest = id_hasher.finalize();
    let mut uuid_bytes = [0u8; 16];
    uuid_bytes.copy_from_slice(&digest[..16]);
    KeyBlock::new(Uuid::from_bytes(uuid_bytes).to_string(), material)
}

pub struct LinkEmulator {
    seed: u64,
    now: u64,
    resync_delay: u64,
    qber_params: QberParams,
    fibers: BTreeMap<String, Fiber>,
    switches: BTreeMap<String, OpticalSwitch>,
    node_switch: BTreeMap<String, String>,
    pairs: BTreeMap<String, QkdDevicePair>,
}

impl LinkEmulator {
    pub fn new(seed: u64) -> Self {
        LinkEmulator {
            seed,
            now: 0,
            resync_delay: DEFAULT_RESYNC_DELAY_S,
            qber_params: QberParams::default(),
            fibers: BTreeMap::new(),
            switches: BTreeMap::new(),
            node_switch: BTreeMap::new(),
            pairs: BTreeMap::new(),
        }
    }

    pub fn set_resync_delay(&mut self, seconds: u64) {
        self.resync_delay = seconds;
    }

    pub fn set_qber_params(&mut self, params: QberParams) {
        self.qber_params = params;
    }

    pub fn set_time(&mut self, now: u64) {
        self.now = now;
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn add_fiber(&mut self, fiber: Fiber) {
        self.fibers.insert(fiber.fiber_id.clone(), fiber);
    }

    pub fn add_switch(&mut self, switch_id: impl Into<String>, node_id: impl Into<String>, ports: Vec<String>) {
        let switch_id = switch_id.into();
        let node_id = node_id.into();
        self.node_switch.insert(node_id.clone(), switch_id.clone());
        self.switches.insert(
            switch_id.clone(),
            OpticalSwitch { switch_id, node_id, ports, cross_connects: BTreeMap::new() },
        );
    }

    pub fn add_pair(
        &mut self,
        link_id: impl Into<String>,
        ports: (EndpointPort, EndpointPort),
        base_rate_bps: f64,
    ) -> Result<(), EmuError> {
        let link_id = link_id.into();
        if self.pairs.contains_key(&link_id) {
            return Err(EmuError::DuplicateLink(link_id));
        }
        for (node, port) in [&ports.0, &ports.1] {
            let switch_id = self
                .node_switch
                .get(node)
                .ok_or_else(|| EmuError::NoSwitchForNode(node.clone()))?;
            let switch = &self.switches[switch_id];
            if !switch.ports.contains(port) {
                return Err(EmuError::UnknownPort { switch: switch_id.clone(), port: port.clone() });
            }
        }
        let endpoints = (ports.0 .0.clone(), ports.1 .0.clone());
        let mut rng_seed_hasher = Sha256::new();
        rng_seed_hasher.update(b"qber-jitter");
        rng_seed_hasher.update(self.seed.to_le_bytes());
        rng_seed_hasher.update(link_id.as_bytes());
        let digest = rng_seed_hasher.finalize();
        let mut rng_seed = [0u8; 32];
        rng_seed.copy_from_slice(&digest);

        let last_series = link_id.clone();
        self.pairs.insert(
            link_id.clone(),
            QkdDevicePair {
                link_id,
                endpoints,
                ports,
                base_rate_bps,
                status: LinkStatus::Down,
                bit_accum: 0.0,
                blocks_emitted: 0,
                switching_until: None,
                last_series,
                qber_rng: ChaCha8Rng::from_seed(rng_seed),
            },
        );
        Ok(())
    }

    pub fn remove_pair(&mut self, link_id: &str) -> Result<(), EmuError> {
        self.pairs
            .remove(link_id)
            .map(|_| ())
            .ok_or_else(|| EmuError::UnknownLink(link_id.to_string()))
    }

    pub fn pair(&self, link_id: &str) -> Option<&QkdDevicePair> {
        self.pairs.get(link_id)
    }

    pub fn pair_ids(&self) -> Vec<String> {
        self.pairs.keys().cloned().collect()
    }

    pub fn fiber(&self, fiber_id: &str) -> Option<&Fiber> {
        self.fibers.get(fiber_id)
    }

    pub fn fibers(&self) -> impl Iterator<Item = &Fiber> {
        self.fibers.values()
    }

    pub fn switch(&self, switch_id: &str) -> Option<&OpticalSwitch> {
        self.switches.get(switch_id)
    }

    pub fn switch_for_node(&self, node_id: &str) -> Option<&OpticalSwitch> {
        self.node_switch.get(node_id).and_then(|id| self.switches.get(id))
    }

    fn port_fiber(&self, node: &str, port: &str) -> Option<&str> {
        let switch_id = self.node_switch.get(node)?;
        self.switches.get(switch_id)?.cross_connects.get(port).map(String::as_str)
    }

    /// The fiber both ends are attached to, if they agree.
    pub fn common_fiber(&self, pair: &QkdDevicePair) -> Option<&Fiber> {
        let a = self.port_fiber(&pair.ports.0 .0, &pair.ports.0 .1)?;
        let b = self.port_fiber(&pair.ports.1 .0, &pair.ports.1 .1)?;
        if a == b {
            self.fibers.get(a)
        } else {
            None
        }
    }

    /// The fiber a pair would report telemetry under right now.
    pub fn series_fiber(&self, pair: &QkdDevicePair) -> Option<&str> {
        if let Some(f) = self.common_fiber(pair) {
            return Some(&f.fiber_id);
        }
        self.port_fiber(&pair.ports.0 .0, &pair.ports.0 .1)
    }

    fn viable(&self, pair: &QkdDevicePair) -> bool {
        self.common_fiber(pair).map(|f| f.operational).unwrap_or(false)
    }

    fn reassess_pair(&mut self, link_id: &str, begin_resync: bool) {
        let Some(pair) = self.pairs.get(link_id) else { return };
        let viable = self.viable(pair);
        let now = self.now;
        let resync = self.resync_delay;
        let pair = self.pairs.get_mut(link_id).expect("pair exists");
        if viable {
            if begin_resync || pair.status == LinkStatus::Down {
                pair.status = LinkStatus::Switching;
                pair.switching_until = Some(now + resync);
                pair.bit_accum = 0.0;
            }
        } else {
            pair.status = LinkStatus::Down;
            pair.switching_until = None;
            pair.bit_accum = 0.0;
        }
    }

    fn pairs_touching_fiber(&self, fiber_id: &str) -> Vec<String> {
        self.pairs
            .values()
            .filter(|p| self.series_fiber(p) == Some(fiber_id))
            .map(|p| p.link_id.clone())
            .collect()
    }

    /// Connects `port` to `fiber_id`, detaching whatever the port held.
    ///
    /// Any device pair on that port re-synchronizes before running again,
    /// even when reconnecting to the same fiber.
    pub fn set_cross_connect(
        &mut self,
        switch_id: &str,
        port: &str,
        fiber_id: &str,
    ) -> Result<(), EmuError> {
        if !self.fibers.contains_key(fiber_id) {
            return Err(EmuError::UnknownFiber(fiber_id.to_string()));
        }
        let switch = self
            .switches
            .get(switch_id)
            .ok_or_else(|| EmuError::UnknownSwitch(switch_id.to_string()))?;
        if !switch.ports.iter().any(|p| p == port) {
            return Err(EmuError::UnknownPort { switch: switch_id.to_string(), port: port.to_string() });
        }
        if let Some((busy_port, _)) = switch
            .cross_connects
            .iter()
            .find(|(p, f)| f.as_str() == fiber_id && p.as_str() != port)
        {
            return Err(EmuError::FiberBusy { fiber: fiber_id.to_string(), port: busy_port.clone() });
        }

        let node = switch.node_id.clone();
        let switch = self.switches.get_mut(switch_id).expect("switch exists");
        switch.cross_connects.insert(port.to_string(), fiber_id.to_string());

        let affected: Vec<String> = self
            .pairs
            .values()
            .filter(|p| {
                (p.ports.0 .0 == node && p.ports.0 .1 == port)
                    || (p.ports.1 .0 == node && p.ports.1 .1 == port)
            })
            .map(|p| p.link_id.clone())
            .collect();
        for link_id in affected {
            self.reassess_pair(&link_id, true);
        }
        Ok(())
    }

    pub fn fail_fiber(&mut self, fiber_id: &str) -> Result<(), EmuError> {
        let fiber = self
            .fibers
            .get_mut(fiber_id)
            .ok_or_else(|| EmuError::UnknownFiber(fiber_id.to_string()))?;
        fiber.operational = false;
        for link_id in self.pairs_touching_fiber(fiber_id) {
            self.reassess_pair(&link_id, false);
        }
        Ok(())
    }

    pub fn restore_fiber(&mut self, fiber_id: &str) -> Result<(), EmuError> {
        let fiber = self
            .fibers
            .get_mut(fiber_id)
            .ok_or_else(|| EmuError::UnknownFiber(fiber_id.to_string()))?;
        fiber.operational = true;
        for link_id in self.pairs_touching_fiber(fiber_id) {
            self.reassess_pair(&link_id, false);
        }
        Ok(())
    }

    /// Advances one pair by `dt` seconds, emitting at most `max_blocks`
    /// key blocks (buffer backpressure) and one monitoring sample.
    pub fn step_pair(
        &mut self,
        link_id: &str,
        dt: f64,
        max_blocks: usize,
    ) -> Result<StepOutcome, EmuError> {
        let now = self.now;
        let seed = self.seed;
        let qber_params = self.qber_params;

        let (series, loss_db) = {
            let pair = self
                .pairs
                .get(link_id)
                .ok_or_else(|| EmuError::UnknownLink(link_id.to_string()))?;
            let series = self.series_fiber(pair).map(str::to_string);
            let loss = self.common_fiber(pair).map(|f| f.loss_db);
            (series, loss)
        };

        let pair = self.pairs.get_mut(link_id).expect("pair exists");
        if let Some(series) = series {
            pair.last_series = series;
        }
        if pair.status == LinkStatus::Switching {
            if pair.switching_until.map(|u| now >= u).unwrap_or(false) {
                pair.status = LinkStatus::Running;
                pair.switching_until = None;
            }
        }

        let mut blocks = Vec::new();
        let (sbr, qber) = match (pair.status, loss_db) {
            (LinkStatus::Running, Some(loss)) => {
                let sbr = sbr_model(pair.base_rate_bps, loss);
                pair.bit_accum += sbr * dt;
                let whole = (pair.bit_accum / BLOCK_BITS).floor() as usize;
                let emit = whole.min(max_blocks);
                for _ in 0..emit {
                    let block = derive_block(seed, &pair.link_id, pair.blocks_emitted);
                    pair.blocks_emitted += 1;
                    blocks.push(block);
                }
                // Whole blocks that exceed buffer capacity are lost; the
                // fractional remainder always carries over.
                pair.bit_accum -= (whole as f64) * BLOCK_BITS;
                let draw = pair.qber_rng.random::<f64>() * 2.0 - 1.0;
                (sbr, qber_model(loss, draw, &qber_params))
            }
            _ => {
                pair.bit_accum = 0.0;
                (0.0, 0.0)
            }
        };

        let sample = MonitoringSample {
            link_id: pair.last_series.clone(),
            pair_id: pair.link_id.clone(),
            timestamp: now,
            sbr_bps: sbr,
            qber,
            status: pair.status,
        };
        Ok(StepOutcome { blocks, sample })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Frozen oracle values, computed independently at 30 digits:
    // 1000 * 10^(-0.45) and 1000 * 10^(-0.95), and their ratio 10^(-0.5).
    const SBR_1000_AT_4_5: f64 = 354.813389233575458;
    const SBR_1000_AT_9_5: f64 = 112.201845430196344;
    const RATIO_5_DB: f64 = 0.316227766016837933;

    #[test]
    fn sbr_model_matches_frozen_values() {
        assert_eq!(sbr_model(1000.0, 0.0), 1000.0);
        assert!((sbr_model(1000.0, 4.5) - SBR_1000_AT_4_5).abs() < 1e-9);
        assert!((sbr_model(1000.0, 9.5) - SBR_1000_AT_9_5).abs() < 1e-9);
        let ratio = sbr_model(1000.0, 9.5) / sbr_model(1000.0, 4.5);
        assert!((ratio - RATIO_5_DB).abs() < 1e-12);
    }

    #[test]
    fn sbr_model_is_strictly_decreasing_with_exact_ratio() {
        let mut prev = sbr_model(500.0, 0.0);
        for i in 1..=40 {
            let loss = i as f64 * 0.5;
            let cur = sbr_model(500.0, loss);
            assert!(cur < prev, "sbr must strictly decrease in loss");
            prev = cur;
        }
        // Ratio identity sbr(l1)/sbr(l2) = 10^((l2-l1)/10).
        let r = sbr_model(777.0, 3.25) / sbr_model(777.0, 8.5);
        assert!((r - 10f64.powf((8.5 - 3.25) / 10.0)).abs() < 1e-12);
    }

    #[test]
    fn qber_model_matches_frozen_values() {
        let p = QberParams { jitter_amp: 0.0, ..QberParams::default() };
        assert!((qber_model(0.0, 0.0, &p) - 0.02).abs() < 1e-15);
        assert!((qber_model(4.5, 0.0, &p) - 0.029).abs() < 1e-15);
    }

    #[test]
    fn qber_jitter_stays_within_bounds() {
        let params = QberParams::default();
        let mut rng = ChaCha8Rng::from_seed([9u8; 32]);
        for _ in 0..10_000 {
            let draw = rng.random::<f64>() * 2.0 - 1.0;
            let q = qber_model(4.5, draw, &params);
            let center = 0.02 + 0.002 * 4.5;
            assert!((q - center).abs() <= params.jitter_amp + 1e-12);
            assert!((0.0..0.12).contains(&q));
        }
    }

    fn demo_emulator() -> LinkEmulator {
        let mut emu = LinkEmulator::new(42);
        emu.add_fiber(Fiber {
            fiber_id: "L1".into(),
            endpoints: ("N1".into(), "N2".into()),
            loss_db: 4.5,
            operational: true,
        });
        emu.add_fiber(Fiber {
            fiber_id: "L5".into(),
            endpoints: ("N1".into(), "N2".into()),
            loss_db: 9.5,
            operational: true,
        });
        emu.add_switch("N1", "N1", vec!["p1".into(), "p2".into()]);
        emu.add_switch("N2", "N2", vec!["p1".into(), "p2".into()]);
        emu.add_pair("QL1", (("N1".into(), "p1".into()), ("N2".into(), "p1".into())), 1000.0)
            .unwrap();
        emu.set_cross_connect("N1", "p1", "L1").unwrap();
        emu.set_cross_connect("N2", "p1", "L1").unwrap();
        emu
    }

    fn run_to_running(emu: &mut LinkEmulator, link: &str) {
        for t in 0..=emu.resync_delay {
            emu.set_time(emu.now + if t == 0 { 0 } else { 1 });
            emu.step_pair(link, 1.0, usize::MAX).unwrap();
        }
    }

    #[test]
    fn step_emits_expected_block_count_with_carry() {
        let mut emu = LinkEmulator::new(7);
        emu.add_fiber(Fiber {
            fiber_id: "F".into(),
            endpoints: ("A".into(), "B".into()),
            loss_db: 0.0,
            operational: true,
        });
        emu.add_switch("A", "A", vec!["p1".into()]);
        emu.add_switch("B", "B", vec!["p1".into()]);
        emu.set_resync_delay(0);
        emu.add_pair("QL", (("A".into(), "p1".into()), ("B".into(), "p1".into())), 354.81).unwrap();
        emu.set_cross_connect("A", "p1", "F").unwrap();
        emu.set_cross_connect("B", "p1", "F").unwrap();
        emu.set_time(0);
        // One warm-up step flips SWITCHING -> RUNNING at zero delay.
        emu.step_pair("QL", 0.0, usize::MAX).unwrap();

        // 354.81 bps for 10 s = 3548.1 bits -> 13 blocks, remainder carried.
        let outcome = emu.step_pair("QL", 10.0, usize::MAX).unwrap();
        assert_eq!(outcome.blocks.len(), 13);
        assert!((outcome.sample.sbr_bps - 354.81).abs() < 1e-12);

        // Two 5 s steps equal one 10 s step in total block count.
        let mut emu2 = LinkEmulator::new(7);
        emu2.add_fiber(Fiber {
            fiber_id: "F".into(),
            endpoints: ("A".into(), "B".into()),
            loss_db: 0.0,
            operational: true,
        });
        emu2.add_switch("A", "A", vec!["p1".into()]);
        emu2.add_switch("B", "B", vec!["p1".into()]);
        emu2.set_resync_delay(0);
        emu2.add_pair("QL", (("A".into(), "p1".into()), ("B".into(), "p1".into())), 354.81).unwrap();
        emu2.set_cross_connect("A", "p1", "F").unwrap();
        emu2.set_cross_connect("B", "p1", "F").unwrap();
        emu2.set_time(0);
        emu2.step_pair("QL", 0.0, usize::MAX).unwrap();
        let n1 = emu2.step_pair("QL", 5.0, usize::MAX).unwrap().blocks.len();
        let n2 = emu2.step_pair("QL", 5.0, usize::MAX).unwrap().blocks.len();
        assert_eq!(n1 + n2, 13);
    }

    #[test]
    fn block_derivation_is_deterministic_and_distinct() {
        let a = derive_block(42, "QL1", 0);
        let b = derive_block(42, "QL1", 0);
        let c = derive_block(42, "QL1", 1);
        let d = derive_block(42, "QL2", 0);
        assert_eq!(a, b);
        assert_ne!(a.key_id, c.key_id);
        assert_ne!(a.key_id, d.key_id);
        assert_eq!(a.material.len(), 32);
        // UUID-formatted identifier.
        assert_eq!(a.key_id.len(), 36);
    }

    #[test]
    fn down_pair_emits_nothing() {
        let mut emu = demo_emulator();
        emu.fail_fiber("L1").unwrap();
        emu.set_time(5);
        let outcome = emu.step_pair("QL1", 10.0, usize::MAX).unwrap();
        assert!(outcome.blocks.is_empty());
        assert_eq!(outcome.sample.sbr_bps, 0.0);
        assert_eq!(outcome.sample.status, LinkStatus::Down);
        assert_eq!(outcome.sample.link_id, "L1");
    }

    #[test]
    fn switch_to_lossier_fiber_reduces_rate() {
        let mut emu = demo_emulator();
        run_to_running(&mut emu, "QL1");
        let before = emu.step_pair("QL1", 1.0, usize::MAX).unwrap().sample.sbr_bps;

        emu.set_cross_connect("N1", "p1", "L5").unwrap();
        emu.set_cross_connect("N2", "p1", "L5").unwrap();
        run_to_running(&mut emu, "QL1");
        let outcome = emu.step_pair("QL1", 1.0, usize::MAX).unwrap();
        assert_eq!(outcome.sample.link_id, "L5");
        let ratio = outcome.sample.sbr_bps / before;
        assert!((ratio - RATIO_5_DB).abs() < 1e-9, "expected 10^(-0.5) drop, got {ratio}");
    }

    #[test]
    fn reconnecting_same_fiber_still_resyncs() {
        let mut emu = demo_emulator();
        run_to_running(&mut emu, "QL1");
        assert_eq!(emu.pair("QL1").unwrap().status, LinkStatus::Running);
        emu.set_cross_connect("N1", "p1", "L1").unwrap();
        assert_eq!(emu.pair("QL1").unwrap().status, LinkStatus::Switching);
    }

    #[test]
    fn connect_to_failed_fiber_stays_down() {
        let mut emu = demo_emulator();
        emu.fail_fiber("L5").unwrap();
        emu.set_cross_connect("N1", "p1", "L5").unwrap();
        emu.set_cross_connect("N2", "p1", "L5").unwrap();
        assert_eq!(emu.pair("QL1").unwrap().status, LinkStatus::Down);
    }

    #[test]
    fn fail_and_restore_cycle() {
        let mut emu = demo_emulator();
        run_to_running(&mut emu, "QL1");
        let rate_before = emu.step_pair("QL1", 1.0, usize::MAX).unwrap().sample.sbr_bps;

        emu.fail_fiber("L1").unwrap();
        let down = emu.step_pair("QL1", 1.0, usize::MAX).unwrap();
        assert_eq!(down.sample.status, LinkStatus::Down);
        assert_eq!(down.sample.sbr_bps, 0.0);

        emu.restore_fiber("L1").unwrap();
        assert_eq!(emu.pair("QL1").unwrap().status, LinkStatus::Switching);
        run_to_running(&mut emu, "QL1");
        let back = emu.step_pair("QL1", 1.0, usize::MAX).unwrap();
        assert_eq!(back.sample.status, LinkStatus::Running);
        assert!((back.sample.sbr_bps - rate_before).abs() < 1e-12);
    }

    #[test]
    fn failing_unattached_spare_changes_nothing() {
        let mut emu = demo_emulator();
        run_to_running(&mut emu, "QL1");
        let before = emu.pair("QL1").unwrap().status;
        emu.fail_fiber("L5").unwrap();
        assert_eq!(emu.pair("QL1").unwrap().status, before);
        assert_eq!(emu.fail_fiber("L9"), Err(EmuError::UnknownFiber("L9".into())));
    }

    #[test]
    fn fiber_busy_on_same_switch() {
        let mut emu = demo_emulator();
        let err = emu.set_cross_connect("N1", "p2", "L1").unwrap_err();
        assert_eq!(err, EmuError::FiberBusy { fiber: "L1".into(), port: "p1".into() });
    }

    #[test]
    fn no_blocks_while_switching_or_down() {
        let mut emu = demo_emulator();
        // Freshly cross-connected: still switching for resync_delay seconds.
        for t in 0..DEFAULT_RESYNC_DELAY_S {
            emu.set_time(t);
            let outcome = emu.step_pair("QL1", 1.0, usize::MAX).unwrap();
            assert_eq!(outcome.sample.status, LinkStatus::Switching, "t={t}");
            assert!(outcome.blocks.is_empty());
        }
        emu.set_time(DEFAULT_RESYNC_DELAY_S);
        let outcome = emu.step_pair("QL1", 1.0, usize::MAX).unwrap();
        assert_eq!(outcome.sample.status, LinkStatus::Running);
    }

    #[test]
    fn conservation_under_stepping() {
        let mut emu = demo_emulator();
        run_to_running(&mut emu, "QL1");
        let rate = sbr_model(1000.0, 4.5);
        let start_emitted = emu.pair("QL1").unwrap().blocks_emitted;
        let mut total_dt = 0.0;
        for (i, dt) in [1.0, 3.0, 0.5, 7.25, 2.0, 11.0, 0.25].iter().enumerate() {
            emu.set_time(100 + i as u64);
            emu.step_pair("QL1", *dt, usize::MAX).unwrap();
            total_dt += dt;
        }
        let emitted_bits = (emu.pair("QL1").unwrap().blocks_emitted - start_emitted) as f64 * 256.0;
        let expected_bits = rate * total_dt;
        assert!((expected_bits - emitted_bits).abs() < 256.0 + 1e-6);
    }
}
