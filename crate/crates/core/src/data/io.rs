//! On-disk layout:
//!
//! ```text
//! <root>/manifest.txt
//! <root>/annotations/<pair_id>.txt
//! <root>/images/<pair_id>_query.png
//! <root>/images/<pair_id>_reference.png
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Alignment, AnnotatedPair, ObjectAnnotation, TransformRecord};
use crate::error::{Error, Result};
use crate::geometry::{BBox, ClickPoint};

pub const MANIFEST_HEADER: &str = "mogeo-dataset v1";

/// Default train/validation/test proportions.
pub const SPLIT_FRACTIONS: [f64; 3] = [0.656, 0.164, 0.180];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Validation, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "validation" | "val" => Ok(SplitName::Validation),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!("unknown split {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub fractions: [f64; 3],
}

impl DatasetSplit {
    /// Assigns ids in order using largest-remainder rounding of `fractions`.
    pub fn apportion(ids: &[String], fractions: [f64; 3]) -> Result<Self> {
        let total: f64 = fractions.iter().sum();
        if fractions.iter().any(|f| *f < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions {fractions:?} must be >= 0 and sum to 1")));
        }
        let n = ids.len();
        let counts = largest_remainder(n, fractions);
        let (train, rest) = ids.split_at(counts[0]);
        let (validation, test) = rest.split_at(counts[1]);
        Ok(Self {
            train: train.to_vec(),
            validation: validation.to_vec(),
            test: test.to_vec(),
            fractions,
        })
    }

    pub fn ids(&self, split: SplitName) -> &[String] {
        match split {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::Test => &self.test,
        }
    }

    pub fn counts(&self) -> [usize; 3] {
        [self.train.len(), self.validation.len(), self.test.len()]
    }

    fn all(&self) -> impl Iterator<Item = (SplitName, &String)> {
        SplitName::ALL
            .into_iter()
            .flat_map(move |s| self.ids(s).iter().map(move |id| (s, id)))
    }
}

pub(crate) fn largest_remainder(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    // stable: earlier split wins ties
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub counts: BTreeMap<SplitName, usize>,
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

fn annotation_text(p: &AnnotatedPair, qpath: &str, rpath: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{}", p.pair_id);
    let _ = writeln!(s, "query {qpath} {} {}", p.query.width(), p.query.height());
    let _ = writeln!(s, "reference {rpath} {} {}", p.reference.width(), p.reference.height());
    let _ = writeln!(s, "alignment {}", p.alignment);
    if let Some(t) = &p.transform {
        // full precision so the inverse map survives a round trip
        let _ = writeln!(
            s,
            "transform flip {} crop {:?} scale {:?} x0 {:?} y0 {:?} src {:?} {:?}",
            u8::from(t.flip),
            t.crop,
            t.scale,
            t.x0,
            t.y0,
            t.src_w,
            t.src_h
        );
    }
    for (i, o) in p.objects.iter().enumerate() {
        let b = o.bbox;
        let q = o.query_box;
        let _ = writeln!(
            s,
            "obj {i} click {} {} box {} {} {} {} qbox {} {} {} {} tag {}",
            fmt4(o.click.x),
            fmt4(o.click.y),
            fmt4(b.cx),
            fmt4(b.cy),
            fmt4(b.w),
            fmt4(b.h),
            fmt4(q.cx),
            fmt4(q.cy),
            fmt4(q.w),
            fmt4(q.h),
            o.tag
        );
    }
    s
}

fn write_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Writes images, one annotation file per pair, and the split manifest.
pub fn write_dataset(pairs: &[AnnotatedPair], split: &DatasetSplit, root: &Path) -> Result<Manifest> {
    if pairs.is_empty() {
        return Err(Error::Empty("pair list"));
    }
    let ids: HashSet<&str> = pairs.iter().map(|p| p.pair_id.as_str()).collect();
    if ids.len() != pairs.len() {
        return Err(Error::SplitMismatch("duplicate pair ids".into()));
    }
    let mut seen = HashSet::new();
    for (_, id) in split.all() {
        if !ids.contains(id.as_str()) {
            return Err(Error::SplitMismatch(format!("split names unknown pair {id}")));
        }
        if !seen.insert(id.as_str()) {
            return Err(Error::SplitMismatch(format!("pair {id} listed twice")));
        }
    }
    if seen.len() != ids.len() {
        return Err(Error::SplitMismatch(format!(
            "split covers {} of {} pairs",
            seen.len(),
            ids.len()
        )));
    }

    let ann_dir = root.join("annotations");
    let img_dir = root.join("images");
    for d in [&ann_dir, &img_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for p in pairs {
        p.validate()?;
        let q = format!("images/{}_query.png", p.pair_id);
        let r = format!("images/{}_reference.png", p.pair_id);
        write_png(&p.query, &root.join(&q))?;
        write_png(&p.reference, &root.join(&r))?;
        let path = ann_dir.join(format!("{}.txt", p.pair_id));
        fs::write(&path, annotation_text(p, &q, &r)).map_err(|e| Error::io(&path, e))?;
    }

    let mut m = String::new();
    let _ = writeln!(m, "{MANIFEST_HEADER}");
    let _ = writeln!(
        m,
        "fractions {:?} {:?} {:?}",
        split.fractions[0], split.fractions[1], split.fractions[2]
    );
    let c = split.counts();
    let _ = writeln!(m, "counts train={} validation={} test={}", c[0], c[1], c[2]);
    for (s, id) in split.all() {
        let _ = writeln!(m, "{} {id}", s.as_str());
    }
    let path = root.join("manifest.txt");
    fs::write(&path, m).map_err(|e| Error::io(&path, e))?;

    Ok(Manifest {
        root: root.to_path_buf(),
        counts: SplitName::ALL.into_iter().zip(c).collect(),
    })
}

struct LineReader<'a> {
    path: &'a Path,
    lines: Vec<(usize, Vec<&'a str>)>,
}

impl<'a> LineReader<'a> {
    fn new(path: &'a Path, text: &'a str) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()))
            .filter(|(_, t)| !t.is_empty())
            .collect();
        Self { path, lines }
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    fn num<T: std::str::FromStr>(&self, line: usize, tok: Option<&&str>) -> Result<T> {
        let tok = tok.ok_or_else(|| self.err(line, "missing field"))?;
        tok.parse().map_err(|_| self.err(line, format!("bad number {tok:?}")))
    }

    fn keyword(&self, line: usize, toks: &[&str], at: usize, kw: &str) -> Result<()> {
        match toks.get(at) {
            Some(t) if *t == kw => Ok(()),
            other => Err(self.err(line, format!("expected {kw:?}, found {other:?}"))),
        }
    }
}

fn read_png(path: &Path) -> Result<image::RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn parse_annotation(root: &Path, path: &Path, text: &str) -> Result<AnnotatedPair> {
    let r = LineReader::new(path, text);
    let mut it = r.lines.iter();
    let (_, first) = it.next().ok_or_else(|| r.err(1, "empty annotation"))?;
    let pair_id = first[0].to_string();

    let mut image_line = |kw: &str| -> Result<(image::RgbImage, u32, u32)> {
        let (ln, t) = it.next().ok_or_else(|| r.err(0, format!("missing {kw} line")))?;
        r.keyword(*ln, t, 0, kw)?;
        let rel = t.get(1).ok_or_else(|| r.err(*ln, "missing path"))?;
        let w: u32 = r.num(*ln, t.get(2))?;
        let h: u32 = r.num(*ln, t.get(3))?;
        let img = read_png(&root.join(rel))?;
        if img.dimensions() != (w, h) {
            return Err(r.err(*ln, format!("image is {:?}, annotation says {w}x{h}", img.dimensions())));
        }
        Ok((img, w, h))
    };
    let (query, _, _) = image_line("query")?;
    let (reference, _, _) = image_line("reference")?;

    let (ln, t) = it.next().ok_or_else(|| r.err(0, "missing alignment line"))?;
    r.keyword(*ln, t, 0, "alignment")?;
    let alignment = match t.get(1) {
        Some(&"V1") => Alignment::V1,
        Some(&"V2") => Alignment::V2,
        other => return Err(r.err(*ln, format!("bad alignment {other:?}"))),
    };

    let mut transform = None;
    let mut objects = Vec::new();
    for (ln, t) in it {
        let ln = *ln;
        match t[0] {
            "transform" => {
                for (i, kw) in [(1, "flip"), (3, "crop"), (5, "scale"), (7, "x0"), (9, "y0"), (11, "src")] {
                    r.keyword(ln, t, i, kw)?;
                }
                let flip: u8 = r.num(ln, t.get(2))?;
                transform = Some(TransformRecord {
                    flip: flip != 0,
                    crop: r.num(ln, t.get(4))?,
                    scale: r.num(ln, t.get(6))?,
                    x0: r.num(ln, t.get(8))?,
                    y0: r.num(ln, t.get(10))?,
                    src_w: r.num(ln, t.get(12))?,
                    src_h: r.num(ln, t.get(13))?,
                });
            }
            "obj" => {
                let idx: usize = r.num(ln, t.get(1))?;
                if idx != objects.len() {
                    return Err(r.err(ln, format!("object index {idx} out of order")));
                }
                r.keyword(ln, t, 2, "click")?;
                r.keyword(ln, t, 5, "box")?;
                let f = |i: usize| r.num::<f64>(ln, t.get(i));
                let click = ClickPoint::new(f(3)?, f(4)?);
                let bbox = BBox::new(f(6)?, f(7)?, f(8)?, f(9)?);
                let mut query_box = None;
                let mut tag = idx as u32;
                let mut k = 10;
                while k < t.len() {
                    match t[k] {
                        "qbox" => {
                            query_box = Some(BBox::new(f(k + 1)?, f(k + 2)?, f(k + 3)?, f(k + 4)?));
                            k += 5;
                        }
                        "tag" => {
                            tag = r.num(ln, t.get(k + 1))?;
                            k += 2;
                        }
                        other => return Err(r.err(ln, format!("unexpected token {other:?}"))),
                    }
                }
                // Without a query box, the tightest statement is a box around the click.
                let query_box = query_box.unwrap_or(BBox::new(click.x, click.y, 2.0, 2.0));
                objects.push(ObjectAnnotation {
                    tag,
                    click,
                    query_box,
                    bbox,
                });
            }
            other => return Err(r.err(ln, format!("unknown record {other:?}"))),
        }
    }

    let pair = AnnotatedPair {
        pair_id,
        query,
        reference,
        objects,
        alignment,
        transform,
    };
    pair.validate()?;
    Ok(pair)
}

/// Loads every pair listed in `<root>/manifest.txt`, validating invariants.
pub fn read_dataset(root: &Path) -> Result<(Vec<AnnotatedPair>, DatasetSplit)> {
    let mpath = root.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let r = LineReader::new(&mpath, &text);
    let mut lines = r.lines.iter();
    match lines.next() {
        Some((_, t)) if t.join(" ") == MANIFEST_HEADER => {}
        Some((ln, _)) => return Err(r.err(*ln, "not a dataset manifest")),
        None => return Err(r.err(1, "empty manifest")),
    }
    let mut split = DatasetSplit {
        train: vec![],
        validation: vec![],
        test: vec![],
        fractions: SPLIT_FRACTIONS,
    };
    for (ln, t) in lines {
        match t[0] {
            "fractions" => {
                for i in 0..3 {
                    split.fractions[i] = r.num(*ln, t.get(i + 1))?;
                }
            }
            "counts" => {}
            name => {
                let s: SplitName = name.parse().map_err(|_| r.err(*ln, format!("unknown split {name:?}")))?;
                let id = t.get(1).ok_or_else(|| r.err(*ln, "missing pair id"))?;
                match s {
                    SplitName::Train => split.train.push(id.to_string()),
                    SplitName::Validation => split.validation.push(id.to_string()),
                    SplitName::Test => split.test.push(id.to_string()),
                }
            }
        }
    }
    let mut pairs = Vec::new();
    for (_, id) in split.all() {
        let path = root.join("annotations").join(format!("{id}.txt"));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let pair = parse_annotation(root, &path, &text)?;
        if &pair.pair_id != id {
            return Err(Error::Parse {
                path,
                line: 1,
                msg: format!("pair id {} does not match manifest entry {id}", pair.pair_id),
            });
        }
        pairs.push(pair);
    }
    Ok((pairs, split))
}
