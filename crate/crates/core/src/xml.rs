//! Canonical XML documents: parsing, serialization, and tree access.
//!
//! The control plane exchanges XML in a fixed canonical form: UTF-8, no
//! comments, no DTDs, no processing instructions, double-quoted attributes,
//! no self-closing tags. For documents already in that form,
//! `serialize(parse(d))` is byte-identical to `d`.

use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum XmlError {
    #[error("malformed document at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("unsupported construct at byte {offset}: {what}")]
    Unsupported { offset: usize, what: String },
}

/// One node of an XML document: an element or a text run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum XmlNode {
    Element(Element),
    Text(String),
}

/// An element with ordered attributes and ordered children.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Element {
    pub tag: String,
    pub attributes: Vec<(String, String)>,
    pub children: Vec<XmlNode>,
}

impl Element {
    pub fn new(tag: impl Into<String>) -> Self {
        Element { tag: tag.into(), attributes: Vec::new(), children: Vec::new() }
    }

    /// Leaf element holding a single text node.
    pub fn with_text(tag: impl Into<String>, text: impl Into<String>) -> Self {
        let mut e = Element::new(tag);
        let text = text.into();
        if !text.is_empty() {
            e.children.push(XmlNode::Text(text));
        }
        e
    }

    pub fn attr(&self, name: &str) -> Option<&str> {
        self.attributes.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_str())
    }

    /// Sets or replaces an attribute, preserving first-write order.
    pub fn set_attr(&mut self, name: &str, value: impl Into<String>) {
        let value = value.into();
        match self.attributes.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = value,
            None => self.attributes.push((name.to_string(), value)),
        }
    }

    pub fn remove_attr(&mut self, name: &str) {
        self.attributes.retain(|(n, _)| n != name);
    }

    pub fn push_element(&mut self, child: Element) {
        self.children.push(XmlNode::Element(child));
    }

    pub fn push_text(&mut self, text: impl Into<String>) {
        self.children.push(XmlNode::Text(text.into()));
    }

    /// First direct child element with the given tag.
    pub fn child(&self, tag: &str) -> Option<&Element> {
        self.child_elements().find(|e| e.tag == tag)
    }

    pub fn child_elements(&self) -> impl Iterator<Item = &Element> {
        self.children.iter().filter_map(|n| match n {
            XmlNode::Element(e) => Some(e),
            XmlNode::Text(_) => None,
        })
    }

    /// Concatenation of the element's direct text children.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for node in &self.children {
            if let XmlNode::Text(t) = node {
                out.push_str(t);
            }
        }
        out
    }

    /// First element with the given tag in this subtree (pre-order), self included.
    pub fn find(&self, tag: &str) -> Option<&Element> {
        if self.tag == tag {
            return Some(self);
        }
        for child in self.child_elements() {
            if let Some(found) = child.find(tag) {
                return Some(found);
            }
        }
        None
    }

    fn serialize_into(&self, out: &mut String) {
        out.push('<');
        out.push_str(&self.tag);
        for (name, value) in &self.attributes {
            out.push(' ');
            out.push_str(name);
            out.push_str("=\"");
            escape_attr_into(value, out);
            out.push('"');
        }
        out.push('>');
        for child in &self.children {
            match child {
                XmlNode::Element(e) => e.serialize_into(out),
                XmlNode::Text(t) => escape_text_into(t, out),
            }
        }
        out.push_str("</");
        out.push_str(&self.tag);
        out.push('>');
    }
}

/// A parsed XML document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XmlTree {
    pub root: Element,
}

impl XmlTree {
    pub fn new(root: Element) -> Self {
        XmlTree { root }
    }

    pub fn parse(document: &str) -> Result<XmlTree, XmlError> {
        parse_xml(document)
    }

    /// Canonical serialization: the exact byte form sent on the wire.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        self.root.serialize_into(&mut out);
        out
    }
}

impl fmt::Display for XmlTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

/// Parses a canonical-form document into a tree, preserving element order,
/// attribute order, and text exactly.
pub fn parse_xml(document: &str) -> Result<XmlTree, XmlError> {
    let mut parser = Parser { bytes: document.as_bytes(), src: document, pos: 0 };
    parser.skip_whitespace();
    let root = parser.parse_element()?;
    parser.skip_whitespace();
    if parser.pos != parser.bytes.len() {
        return Err(parser.err("content after document root"));
    }
    Ok(XmlTree { root })
}

fn escape_text_into(text: &str, out: &mut String) {
    for ch in text.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            c => out.push(c),
        }
    }
}

fn escape_attr_into(value: &str, out: &mut String) {
    for ch in value.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            c => out.push(c),
        }
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err(&self, reason: impl Into<String>) -> XmlError {
        XmlError::Malformed { offset: self.pos, reason: reason.into() }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn skip_whitespace(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\r' | b'\n')) {
            self.pos += 1;
        }
    }

    fn expect(&mut self, byte: u8) -> Result<(), XmlError> {
        if self.peek() == Some(byte) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected {:?}", byte as char)))
        }
    }

    fn check_unsupported(&self) -> Result<(), XmlError> {
        let rest = &self.bytes[self.pos..];
        let what = if rest.starts_with(b"<!--") {
            "comment"
        } else if rest.starts_with(b"<![CDATA[") {
            "CDATA section"
        } else if rest.starts_with(b"<!") {
            "DTD declaration"
        } else if rest.starts_with(b"<?") {
            "processing instruction"
        } else {
            return Ok(());
        };
        Err(XmlError::Unsupported { offset: self.pos, what: what.into() })
    }

    fn parse_name(&mut self) -> Result<String, XmlError> {
        let start = self.pos;
        match self.peek() {
            Some(b) if b.is_ascii_alphabetic() || b == b'_' => self.pos += 1,
            _ => return Err(self.err("invalid name start character")),
        }
        while let Some(b) = self.peek() {
            if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.' | b':') {
                self.pos += 1;
            } else {
                break;
            }
        }
        Ok(self.src[start..self.pos].to_string())
    }

    fn parse_element(&mut self) -> Result<Element, XmlError> {
        self.check_unsupported()?;
        self.expect(b'<')?;
        let tag = self.parse_name()?;
        let mut element = Element::new(tag);

        loop {
            let had_space = matches!(self.peek(), Some(b' ' | b'\t' | b'\r' | b'\n'));
            self.skip_whitespace();
            match self.peek() {
                Some(b'>') => {
                    self.pos += 1;
                    break;
                }
                Some(b'/') => {
                    self.pos += 1;
                    self.expect(b'>')?;
                    return Ok(element); // empty element form; canonical output expands it
                }
                Some(_) if had_space => {
                    let name = self.parse_name()?;
                    self.skip_whitespace();
                    self.expect(b'=')?;
                    self.skip_whitespace();
                    let value = self.parse_attr_value()?;
                    if element.attr(&name).is_some() {
                        return Err(self.err(format!("duplicate attribute {name:?}")));
                    }
                    element.attributes.push((name, value));
                }
                _ => return Err(self.err("expected attribute, '>' or '/>'")),
            }
        }

        // Children until the matching close tag.
        loop {
            match self.peek() {
                None => return Err(self.err(format!("unterminated element <{}>", element.tag))),
                Some(b'<') => {
                    if self.bytes[self.pos..].starts_with(b"</") {
                        self.pos += 2;
                        let close = self.parse_name()?;
                        if close != element.tag {
                            return Err(self.err(format!(
                                "mismatched close tag: expected </{}>, found </{}>",
                                element.tag, close
                            )));
                        }
                        self.skip_whitespace();
                        self.expect(b'>')?;
                        return Ok(element);
                    }
                    element.children.push(XmlNode::Element(self.parse_element()?));
                }
                Some(_) => {
                    let text = self.parse_text()?;
                    element.children.push(XmlNode::Text(text));
                }
            }
        }
    }

    fn parse_attr_value(&mut self) -> Result<String, XmlError> {
        let quote = match self.peek() {
            Some(q @ (b'"' | b'\'')) => q,
            _ => return Err(self.err("expected quoted attribute value")),
        };
        self.pos += 1;
        let mut value = String::new();
        loop {
            match self.peek() {
                None => return Err(self.err("unterminated attribute value")),
                Some(q) if q == quote => {
                    self.pos += 1;
                    return Ok(value);
                }
                Some(b'<') => return Err(self.err("'<' in attribute value")),
                Some(b'&') => value.push(self.parse_entity()?),
                Some(_) => {
                    let ch = self.next_char()?;
                    value.push(ch);
                }
            }
        }
    }

    fn parse_text(&mut self) -> Result<String, XmlError> {
        let mut text = String::new();
        loop {
            match self.peek() {
                None | Some(b'<') => return Ok(text),
                Some(b'&') => text.push(self.parse_entity()?),
                Some(_) => {
                    let ch = self.next_char()?;
                    text.push(ch);
                }
            }
        }
    }

    fn next_char(&mut self) -> Result<char, XmlError> {
        let ch = self.src[self.pos..]
            .chars()
            .next()
            .ok_or_else(|| self.err("unexpected end of input"))?;
        self.pos += ch.len_utf8();
        Ok(ch)
    }

    fn parse_entity(&mut self) -> Result<char, XmlError> {
        let start = self.pos;
        self.expect(b'&')?;
        let end = self.bytes[self.pos..]
            .iter()
            .position(|&b| b == b';')
            .map(|i| self.pos + i)
            .ok_or_else(|| self.err("unterminated entity reference"))?;
        let name = &self.src[self.pos..end];
        self.pos = end + 1;
        let ch = match name {
            "amp" => '&',
            "lt" => '<',
            "gt" => '>',
            "quot" => '"',
            "apos" => '\'',
            _ if name.starts_with("#x") || name.starts_with("#X") => {
                let code = u32::from_str_radix(&name[2..], 16)
                    .map_err(|_| XmlError::Malformed { offset: start, reason: "bad character reference".into() })?;
                char::from_u32(code)
                    .ok_or(XmlError::Malformed { offset: start, reason: "invalid character reference".into() })?
            }
            _ if name.starts_with('#') => {
                let code: u32 = name[1..]
                    .parse()
                    .map_err(|_| XmlError::Malformed { offset: start, reason: "bad character reference".into() })?;
                char::from_u32(code)
                    .ok_or(XmlError::Malformed { offset: start, reason: "invalid character reference".into() })?
            }
            _ => {
                return Err(XmlError::Malformed {
                    offset: start,
                    reason: format!("unknown entity &{name};"),
                })
            }
        };
        Ok(ch)
    }
}
