//! PLY reading and writing for labeled clouds and per-point annotations.
//!
//! Vertex properties are written in a fixed order:
//!
//! ```text
//! x y z            float
//! red green blue   uchar
//! intensity        float
//! label            uchar
//! instance         int     (only when some point carries a ground-truth instance)
//! confidence       float   \
//! predicted        uchar    | only with an annotation layer
//! cluster_id       int      |
//! classified       uchar   /
//! ```
//!
//! The reader accepts any property order and scalar type, ASCII or binary
//! (either endianness), and skips unknown properties and elements.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LabeledPoint, PointCloud};

/// Per-point outputs of scoring and post-processing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationLayer {
    pub confidence: Vec<f32>,
    pub predicted: Vec<u8>,
    /// -1 when the point belongs to no instance.
    pub cluster_id: Vec<i32>,
    /// False for points that were never scored (they fell only into
    /// discarded voxels or were not sampled).
    pub classified: Vec<bool>,
}

impl AnnotationLayer {
    pub fn unscored(len: usize) -> Self {
        AnnotationLayer {
            confidence: vec![0.0; len],
            predicted: vec![0; len],
            cluster_id: vec![-1; len],
            classified: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.confidence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidence.is_empty()
    }

    fn check(&self, points: usize) -> Result<()> {
        let n = self.confidence.len();
        if self.predicted.len() != n || self.cluster_id.len() != n || self.classified.len() != n {
            return Err(Error::Contract("annotation columns differ in length".into()));
        }
        if n != points {
            return Err(Error::Contract(format!(
                "annotation layer has {n} entries for {points} points"
            )));
        }
        if let Some(c) = self.cluster_id.iter().find(|&&c| c < -1) {
            return Err(Error::Contract(format!("cluster id {c} below -1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyFormat {
    Ascii,
    #[default]
    BinaryLittleEndian,
}

/// Everything recovered from a PLY file.
#[derive(Debug, Clone)]
pub struct PlyContents {
    pub cloud: PointCloud,
    pub annotations: Option<AnnotationLayer>,
    pub warnings: Vec<String>,
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    Ok(read_ply(path)?.cloud)
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PlyContents> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let contents = read_ply_from(BufReader::new(file), tag)?;
    for w in &contents.warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(contents)
}

pub fn write_cloud(
    cloud: &PointCloud,
    annotations: Option<&AnnotationLayer>,
    path: impl AsRef<Path>,
    format: PlyFormat,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_ply_to(&mut w, cloud, annotations, format).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_ply_to<W: Write>(
    w: &mut W,
    cloud: &PointCloud,
    annotations: Option<&AnnotationLayer>,
    format: PlyFormat,
) -> Result<()> {
    if let Some(a) = annotations {
        a.check(cloud.len())?;
    }
    let io = |e| Error::io("<stream>", e);
    let with_instance = cloud.points().iter().any(|p| p.instance != 0);

    let mut header = String::from("ply\n");
    header.push_str(match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    if !cloud.tag.is_empty() {
        header.push_str(&format!("comment tag {}\n", cloud.tag));
    }
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    header.push_str(
        "property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n\
         property float intensity\nproperty uchar label\n",
    );
    if with_instance {
        header.push_str("property int instance\n");
    }
    if annotations.is_some() {
        header.push_str(
            "property float confidence\nproperty uchar predicted\n\
             property int cluster_id\nproperty uchar classified\n",
        );
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(io)?;

    match format {
        PlyFormat::Ascii => {
            let mut line = String::new();
            for (i, p) in cloud.points().iter().enumerate() {
                use std::fmt::Write as _;
                line.clear();
                let _ = write!(
                    line,
                    "{} {} {} {} {} {} {} {}",
                    p.x, p.y, p.z, p.r, p.g, p.b, p.intensity, p.label
                );
                if with_instance {
                    let _ = write!(line, " {}", p.instance);
                }
                if let Some(a) = annotations {
                    let _ = write!(
                        line,
                        " {} {} {} {}",
                        a.confidence[i], a.predicted[i], a.cluster_id[i], a.classified[i] as u8
                    );
                }
                line.push('\n');
                w.write_all(line.as_bytes()).map_err(io)?;
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let mut buf = Vec::with_capacity(32);
            for (i, p) in cloud.points().iter().enumerate() {
                buf.clear();
                buf.extend_from_slice(&p.x.to_le_bytes());
                buf.extend_from_slice(&p.y.to_le_bytes());
                buf.extend_from_slice(&p.z.to_le_bytes());
                buf.extend_from_slice(&[p.r, p.g, p.b]);
                buf.extend_from_slice(&p.intensity.to_le_bytes());
                buf.push(p.label);
                if with_instance {
                    buf.extend_from_slice(&p.instance.to_le_bytes());
                }
                if let Some(a) = annotations {
                    buf.extend_from_slice(&a.confidence[i].to_le_bytes());
                    buf.push(a.predicted[i]);
                    buf.extend_from_slice(&a.cluster_id[i].to_le_bytes());
                    buf.push(a.classified[i] as u8);
                }
                w.write_all(&buf).map_err(io)?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Encoding {
    Ascii,
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }
}

#[derive(Debug, Clone)]
enum PropertyKind {
    Scalar(Scalar),
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Property {
    name: String,
    kind: PropertyKind,
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    encoding: Encoding,
    elements: Vec<Element>,
    tag: Option<String>,
}

fn header_error(line: usize, text: &str, message: impl Into<String>) -> Error {
    Error::Header {
        line,
        text: text.to_string(),
        message: message.into(),
    }
}

fn read_header<R: BufRead>(r: &mut R) -> Result<Header> {
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut tag = None;
    let mut raw = String::new();
    let mut lineno = 0;
    loop {
        raw.clear();
        let read = r.read_line(&mut raw).map_err(|e| Error::io("<stream>", e))?;
        lineno += 1;
        if read == 0 {
            return Err(header_error(lineno, "", "unexpected end of file before end_header"));
        }
        let text = raw.trim_end_matches(['\n', '\r']);
        let mut words = text.split_whitespace();
        let keyword = words.next().unwrap_or("");
        if lineno == 1 {
            if keyword != "ply" {
                return Err(header_error(lineno, text, "missing `ply` magic"));
            }
            continue;
        }
        match keyword {
            "format" => {
                encoding = Some(match words.next() {
                    Some("ascii") => Encoding::Ascii,
                    Some("binary_little_endian") => Encoding::Little,
                    Some("binary_big_endian") => Encoding::Big,
                    _ => return Err(header_error(lineno, text, "unknown format")),
                });
            }
            "comment" => {
                if words.next() == Some("tag") {
                    let rest: Vec<&str> = words.collect();
                    tag = Some(rest.join(" "));
                }
            }
            "obj_info" | "" => {}
            "element" => {
                let name = words
                    .next()
                    .ok_or_else(|| header_error(lineno, text, "element without name"))?;
                let count = words
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| header_error(lineno, text, "element count is not an integer"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            "property" => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| header_error(lineno, text, "property before any element"))?;
                let ty = words
                    .next()
                    .ok_or_else(|| header_error(lineno, text, "property without type"))?;
                let kind = if ty == "list" {
                    let count = words.next().and_then(Scalar::parse);
                    let item = words.next().and_then(Scalar::parse);
                    match (count, item) {
                        (Some(count), Some(item)) => PropertyKind::List { count, item },
                        _ => return Err(header_error(lineno, text, "bad list property types")),
                    }
                } else {
                    PropertyKind::Scalar(
                        Scalar::parse(ty)
                            .ok_or_else(|| header_error(lineno, text, format!("unknown type `{ty}`")))?,
                    )
                };
                let name = words
                    .next()
                    .ok_or_else(|| header_error(lineno, text, "property without name"))?;
                element.properties.push(Property {
                    name: name.to_string(),
                    kind,
                });
            }
            "end_header" => break,
            _ => return Err(header_error(lineno, text, "unrecognized header keyword")),
        }
    }
    let encoding = encoding.ok_or_else(|| header_error(lineno, "end_header", "no format line"))?;
    Ok(Header {
        encoding,
        elements,
        tag,
    })
}

/// Streams scalar values of the body regardless of encoding.
struct Body<R> {
    reader: R,
    encoding: Encoding,
    tokens: std::vec::IntoIter<String>,
    line: String,
}

impl<R: BufRead> Body<R> {
    fn next_token(&mut self) -> std::io::Result<Option<String>> {
        loop {
            if let Some(t) = self.tokens.next() {
                return Ok(Some(t));
            }
            self.line.clear();
            if self.reader.read_line(&mut self.line)? == 0 {
                return Ok(None);
            }
            self.tokens = self
                .line
                .split_whitespace()
                .map(str::to_string)
                .collect::<Vec<_>>()
                .into_iter();
        }
    }

    fn scalar(&mut self, ty: Scalar, vertex: usize) -> Result<f64> {
        let data_err = |message: String| Error::Data { vertex, message };
        if self.encoding == Encoding::Ascii {
            let tok = self
                .next_token()
                .map_err(|e| Error::io("<stream>", e))?
                .ok_or_else(|| data_err("unexpected end of data".into()))?;
            let bad = || data_err(format!("cannot parse `{tok}` as {ty:?}"));
            return match ty {
                // Parse at declared precision so f32 values survive unchanged.
                Scalar::F32 => tok.parse::<f32>().map(f64::from).map_err(|_| bad()),
                Scalar::F64 => tok.parse::<f64>().map_err(|_| bad()),
                _ => tok.parse::<i64>().map(|v| v as f64).map_err(|_| bad()),
            };
        }
        let mut buf = [0u8; 8];
        let n = ty.size();
        self.reader
            .read_exact(&mut buf[..n])
            .map_err(|_| data_err("unexpected end of data".into()))?;
        let b = &buf[..n];
        let little = self.encoding == Encoding::Little;
        macro_rules! num {
            ($t:ty) => {{
                let arr = b.try_into().unwrap();
                (if little { <$t>::from_le_bytes(arr) } else { <$t>::from_be_bytes(arr) }) as f64
            }};
        }
        Ok(match ty {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => num!(i16),
            Scalar::U16 => num!(u16),
            Scalar::I32 => num!(i32),
            Scalar::U32 => num!(u32),
            Scalar::F32 => num!(f32),
            Scalar::F64 => num!(f64),
        })
    }

    fn skip_property(&mut self, p: &Property, vertex: usize) -> Result<()> {
        match p.kind {
            PropertyKind::Scalar(ty) => {
                self.scalar(ty, vertex)?;
            }
            PropertyKind::List { count, item } => {
                let len = self.scalar(count, vertex)? as usize;
                for _ in 0..len {
                    self.scalar(item, vertex)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Slot {
    X,
    Y,
    Z,
    R,
    G,
    B,
    Intensity,
    Label,
    Instance,
    Confidence,
    Predicted,
    Cluster,
    Classified,
    Skip,
}

fn slot_for(name: &str) -> Slot {
    match name {
        "x" => Slot::X,
        "y" => Slot::Y,
        "z" => Slot::Z,
        "red" | "r" => Slot::R,
        "green" | "g" => Slot::G,
        "blue" | "b" => Slot::B,
        "intensity" | "scalar_intensity" => Slot::Intensity,
        "label" => Slot::Label,
        "instance" => Slot::Instance,
        "confidence" => Slot::Confidence,
        "predicted" => Slot::Predicted,
        "cluster_id" => Slot::Cluster,
        "classified" => Slot::Classified,
        _ => Slot::Skip,
    }
}

pub fn read_ply_from<R: BufRead>(mut reader: R, default_tag: String) -> Result<PlyContents> {
    let header = read_header(&mut reader)?;
    let mut warnings = Vec::new();

    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| header_error(0, "", "no `vertex` element"))?;
    let vertex = &header.elements[vertex_pos];
    let has = |n: &str| vertex.properties.iter().any(|p| p.name == n);
    for axis in ["x", "y", "z"] {
        if !has(axis) {
            return Err(header_error(0, "", format!("vertex element lacks `{axis}`")));
        }
    }
    if !has("intensity") {
        warnings.push("no `intensity` property, defaulting to 0".into());
    }
    if !has("label") {
        warnings.push("no `label` property, all points labeled non-crack".into());
    }
    let annotated = has("confidence");
    let slots: Vec<Slot> = vertex
        .properties
        .iter()
        .map(|p| match p.kind {
            PropertyKind::Scalar(_) => slot_for(&p.name),
            PropertyKind::List { .. } => Slot::Skip,
        })
        .collect();

    let mut body = Body {
        reader,
        encoding: header.encoding,
        tokens: Vec::new().into_iter(),
        line: String::new(),
    };

    for element in &header.elements[..vertex_pos] {
        for i in 0..element.count {
            for p in &element.properties {
                body.skip_property(p, i)?;
            }
        }
    }

    let mut points = Vec::with_capacity(vertex.count);
    let mut layer = AnnotationLayer::default();
    if annotated {
        layer = AnnotationLayer::unscored(vertex.count);
        layer.classified.fill(true);
    }
    for i in 0..vertex.count {
        let mut p = LabeledPoint::new(0.0, 0.0, 0.0);
        for (prop, slot) in vertex.properties.iter().zip(&slots) {
            let PropertyKind::Scalar(ty) = prop.kind else {
                body.skip_property(prop, i)?;
                continue;
            };
            let v = body.scalar(ty, i)?;
            match slot {
                Slot::X => p.x = v as f32,
                Slot::Y => p.y = v as f32,
                Slot::Z => p.z = v as f32,
                Slot::R => p.r = v as u8,
                Slot::G => p.g = v as u8,
                Slot::B => p.b = v as u8,
                Slot::Intensity => p.intensity = v as f32,
                Slot::Label => {
                    if v != 0.0 && v != 1.0 {
                        return Err(Error::Data {
                            vertex: i,
                            message: format!("label {v} is not binary"),
                        });
                    }
                    p.label = v as u8;
                }
                Slot::Instance => p.instance = v as i32,
                Slot::Confidence if annotated => layer.confidence[i] = v as f32,
                Slot::Predicted if annotated => layer.predicted[i] = v as u8,
                Slot::Cluster if annotated => layer.cluster_id[i] = v as i32,
                Slot::Classified if annotated => layer.classified[i] = v != 0.0,
                _ => {}
            }
        }
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(Error::Data {
                vertex: i,
                message: "non-finite coordinate".into(),
            });
        }
        points.push(p);
    }

    let tag = header.tag.unwrap_or(default_tag);
    Ok(PlyContents {
        cloud: PointCloud::new(tag, points),
        annotations: annotated.then_some(layer),
        warnings,
    })
}

/// Color override for classification display: true positives blue,
/// false negatives red, false positives cyan. True negatives keep their
/// scanned color.
pub fn classification_colors(cloud: &PointCloud, predicted: &[u8]) -> Result<PointCloud> {
    if predicted.len() != cloud.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} points",
            predicted.len(),
            cloud.len()
        )));
    }
    let points = cloud
        .points()
        .iter()
        .zip(predicted)
        .map(|(p, &pred)| {
            let mut q = *p;
            let rgb = match (p.label, pred) {
                (1, 1) => Some(TP_COLOR),
                (1, _) => Some(FN_COLOR),
                (_, 1) => Some(FP_COLOR),
                _ => None,
            };
            if let Some([r, g, b]) = rgb {
                q.r = r;
                q.g = g;
                q.b = b;
            }
            q
        })
        .collect();
    Ok(PointCloud::new(cloud.tag.clone(), points))
}

pub const TP_COLOR: [u8; 3] = [0, 0, 255];
pub const FN_COLOR: [u8; 3] = [255, 0, 0];
pub const FP_COLOR: [u8; 3] = [0, 255, 255];
