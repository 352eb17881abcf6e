//! Pascal-VOC style XML annotations.
//!
//! Files store 1-based integer pixel indices; internally boxes are
//! zero-based continuous coordinates. Reading maps `xmin -> xmin - 1` and
//! keeps `xmax`, so a box covering pixels `xmin..=xmax` becomes
//! `[xmin - 1, xmax)`. Writing applies the inverse.

use roxmltree::{Document, Node};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedObject {
    pub name: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<AnnotatedObject>,
}

impl Annotation {
    /// Checks every box is valid and inside the image.
    pub fn validate(&self) -> Result<()> {
        for o in &self.objects {
            o.bbox.validate()?;
            let b = &o.bbox;
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > self.width as f64 || b.y2 > self.height as f64 {
                return Err(Error::Validation(format!(
                    "box [{}, {}, {}, {}] of `{}` lies outside the {}x{} image",
                    b.x1, b.y1, b.x2, b.y2, o.name, self.width, self.height
                )));
            }
        }
        Ok(())
    }
}

fn parse_err(element: &str, reason: impl Into<String>) -> Error {
    Error::Parse {
        element: element.to_string(),
        reason: reason.into(),
    }
}

fn child<'a, 'i>(node: Node<'a, 'i>, name: &str) -> Option<Node<'a, 'i>> {
    node.children().find(|c| c.has_tag_name(name))
}

fn text<'a>(node: Node<'a, '_>, name: &str) -> Result<&'a str> {
    child(node, name)
        .and_then(|c| c.text())
        .map(str::trim)
        .ok_or_else(|| parse_err(name, "missing element or text"))
}

fn number<T: std::str::FromStr>(node: Node, name: &str) -> Result<T> {
    let t = text(node, name)?;
    t.parse()
        .map_err(|_| parse_err(name, format!("`{t}` is not a valid number")))
}

pub fn parse_voc_xml(bytes: &[u8]) -> Result<Annotation> {
    let src = std::str::from_utf8(bytes).map_err(|_| parse_err("annotation", "document is not UTF-8"))?;
    let doc = Document::parse(src).map_err(|e| parse_err("annotation", e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(parse_err("annotation", format!("root element is <{}>", root.tag_name().name())));
    }
    let id = child(root, "filename")
        .and_then(|n| n.text())
        .map(|s| s.trim().to_string())
        .unwrap_or_default();
    let size = child(root, "size").ok_or_else(|| parse_err("size", "missing element"))?;
    let width: usize = number(size, "width")?;
    let height: usize = number(size, "height")?;
    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let name = text(obj, "name")?.to_string();
        let bb = child(obj, "bndbox").ok_or_else(|| parse_err("bndbox", format!("object `{name}` has no bndbox")))?;
        let xmin: f64 = number(bb, "xmin")?;
        let ymin: f64 = number(bb, "ymin")?;
        let xmax: f64 = number(bb, "xmax")?;
        let ymax: f64 = number(bb, "ymax")?;
        if xmin > xmax || ymin > ymax {
            return Err(Error::Validation(format!(
                "object `{name}` has xmin/ymin ({xmin}, {ymin}) above xmax/ymax ({xmax}, {ymax})"
            )));
        }
        let bbox = BBox::new(xmin - 1.0, ymin - 1.0, xmax, ymax)?;
        objects.push(AnnotatedObject { name, bbox });
    }
    let ann = Annotation {
        id,
        width,
        height,
        objects,
    };
    ann.validate()?;
    Ok(ann)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
        .replace('\'', "&apos;")
}

pub fn write_voc_xml(ann: &Annotation) -> Vec<u8> {
    let mut s = String::from("<annotation>\n");
    s.push_str(&format!("  <filename>{}</filename>\n", escape(&ann.id)));
    s.push_str(&format!(
        "  <size>\n    <width>{}</width>\n    <height>{}</height>\n    <depth>1</depth>\n  </size>\n",
        ann.width, ann.height
    ));
    for o in &ann.objects {
        let b = &o.bbox;
        s.push_str(&format!(
            "  <object>\n    <name>{}</name>\n    <bndbox>\n      <xmin>{}</xmin>\n      <ymin>{}</ymin>\n      <xmax>{}</xmax>\n      <ymax>{}</ymax>\n    </bndbox>\n  </object>\n",
            escape(&o.name),
            b.x1 + 1.0,
            b.y1 + 1.0,
            b.x2,
            b.y2
        ));
    }
    s.push_str("</annotation>\n");
    s.into_bytes()
}
