//! Segmentation label maps to per-part grid weights.
//!
//! A [`PartScheme`] groups raw segmentation labels into parts. From a label
//! map and a scheme we tally, for every grid cell, how many pixels fall into
//! each part. Normalizing those counts per part over all cells gives the
//! [`GridWeightMap`] used for weighted pooling; normalizing per cell over all
//! pixels (background included) gives the [`GridPartFractions`] used for
//! attribute activation maps.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name used for non-part labels in scheme documents.
pub const BACKGROUND: &str = "background";

pub const DEFAULT_GRID: usize = 8;

const SEG_MAGIC: &[u8; 6] = b"PVSEG1";

/// Where a raw segmentation label goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelTarget {
    Part(usize),
    Background,
}

/// Ordered list of parts plus the raw-label to part assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PartScheme {
    name: String,
    parts: Vec<String>,
    label_to_part: BTreeMap<u8, LabelTarget>,
}

#[derive(Serialize, Deserialize)]
struct SchemeDoc {
    name: String,
    parts: Vec<String>,
    label_to_part: BTreeMap<String, String>,
}

// Human parsing labels (LIP convention) used by the presets.
mod lip {
    pub const BACKGROUND: u8 = 0;
    pub const HAT: u8 = 1;
    pub const HAIR: u8 = 2;
    pub const GLOVE: u8 = 3;
    pub const SUNGLASSES: u8 = 4;
    pub const UPPER_CLOTHES: u8 = 5;
    pub const DRESS: u8 = 6;
    pub const COAT: u8 = 7;
    pub const SOCKS: u8 = 8;
    pub const PANTS: u8 = 9;
    pub const JUMPSUITS: u8 = 10;
    pub const SCARF: u8 = 11;
    pub const SKIRT: u8 = 12;
    pub const FACE: u8 = 13;
    pub const LEFT_ARM: u8 = 14;
    pub const RIGHT_ARM: u8 = 15;
    pub const LEFT_LEG: u8 = 16;
    pub const RIGHT_LEG: u8 = 17;
    pub const LEFT_SHOE: u8 = 18;
    pub const RIGHT_SHOE: u8 = 19;
}

impl PartScheme {
    pub fn new(
        name: impl Into<String>,
        parts: Vec<String>,
        label_to_part: BTreeMap<u8, LabelTarget>,
    ) -> Result<Self> {
        let name = name.into();
        if parts.is_empty() {
            return Err(Error::arg("part scheme needs at least one part"));
        }
        for (i, p) in parts.iter().enumerate() {
            if p.is_empty() || p == BACKGROUND {
                return Err(Error::arg(format!("invalid part name '{p}'")));
            }
            if parts[..i].contains(p) {
                return Err(Error::arg(format!("duplicate part name '{p}'")));
            }
        }
        for target in label_to_part.values() {
            if let LabelTarget::Part(l) = target {
                if *l >= parts.len() {
                    return Err(Error::arg(format!("label maps to part index {l} out of range")));
                }
            }
        }
        Ok(Self {
            name,
            parts,
            label_to_part,
        })
    }

    fn from_groups(name: &str, groups: &[(&str, &[u8])]) -> Self {
        let mut map = BTreeMap::new();
        map.insert(lip::BACKGROUND, LabelTarget::Background);
        for (l, (_, labels)) in groups.iter().enumerate() {
            for &lab in labels.iter() {
                map.insert(lab, LabelTarget::Part(l));
            }
        }
        let parts = groups.iter().map(|(p, _)| p.to_string()).collect();
        Self::new(name, parts, map).expect("preset schemes are valid")
    }

    /// Four parts: head, upper-body, lower-body, shoes.
    pub fn pvse4() -> Self {
        use lip::*;
        Self::from_groups(
            "pvse4",
            &[
                ("head", &[HAT, HAIR, SUNGLASSES, FACE]),
                (
                    "upper-body",
                    &[UPPER_CLOTHES, DRESS, COAT, SCARF, GLOVE, LEFT_ARM, RIGHT_ARM],
                ),
                (
                    "lower-body",
                    &[PANTS, SKIRT, JUMPSUITS, SOCKS, LEFT_LEG, RIGHT_LEG],
                ),
                ("shoes", &[LEFT_SHOE, RIGHT_SHOE]),
            ],
        )
    }

    pub fn pvse8() -> Self {
        use lip::*;
        Self::from_groups(
            "pvse8",
            &[
                ("head", &[HAT, HAIR, SUNGLASSES, FACE]),
                ("upper-body", &[UPPER_CLOTHES, SCARF]),
                ("dress", &[DRESS]),
                ("coat", &[COAT]),
                ("lower-body", &[PANTS, SKIRT, JUMPSUITS]),
                ("arm", &[LEFT_ARM, RIGHT_ARM, GLOVE]),
                ("leg", &[LEFT_LEG, RIGHT_LEG, SOCKS]),
                ("shoes", &[LEFT_SHOE, RIGHT_SHOE]),
            ],
        )
    }

    pub fn pvse16() -> Self {
        use lip::*;
        Self::from_groups(
            "pvse16",
            &[
                ("hat", &[HAT]),
                ("hair", &[HAIR]),
                ("glove", &[GLOVE]),
                ("sunglasses", &[SUNGLASSES]),
                ("upper-body", &[UPPER_CLOTHES, SCARF]),
                ("dress", &[DRESS]),
                ("coat", &[COAT]),
                ("socks", &[SOCKS]),
                ("pants", &[PANTS]),
                ("jumpsuits", &[JUMPSUITS]),
                ("skirt", &[SKIRT]),
                ("face", &[FACE]),
                ("arm", &[LEFT_ARM, RIGHT_ARM]),
                ("leg", &[LEFT_LEG, RIGHT_LEG]),
                ("left-shoe", &[LEFT_SHOE]),
                ("right-shoe", &[RIGHT_SHOE]),
            ],
        )
    }

    /// Scheme with labels `1..=L` mapping to `part-1..part-L` and 0 to background.
    pub fn numbered(parts: usize) -> Result<Self> {
        if parts == 0 || parts > 255 {
            return Err(Error::arg("numbered scheme needs 1..=255 parts"));
        }
        let names = (1..=parts).map(|p| format!("part-{p}")).collect();
        let mut map = BTreeMap::new();
        map.insert(0, LabelTarget::Background);
        for p in 0..parts {
            map.insert((p + 1) as u8, LabelTarget::Part(p));
        }
        Self::new(format!("numbered{parts}"), names, map)
    }

    /// Looks up a preset by name (`pvse4`, `pvse8`, `pvse16`).
    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "pvse4" | "pvse-4" => Some(Self::pvse4()),
            "pvse8" | "pvse-8" => Some(Self::pvse8()),
            "pvse16" | "pvse-16" => Some(Self::pvse16()),
            _ => None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn parts(&self) -> &[String] {
        &self.parts
    }

    pub fn num_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn label_to_part(&self) -> &BTreeMap<u8, LabelTarget> {
        &self.label_to_part
    }

    pub fn target(&self, label: u8) -> Option<LabelTarget> {
        self.label_to_part.get(&label).copied()
    }

    /// Part index by name, case-insensitive.
    pub fn part_index(&self, name: &str) -> Option<usize> {
        self.parts.iter().position(|p| p.eq_ignore_ascii_case(name))
    }

    /// Some label that maps to part `l`, if any.
    pub fn representative_label(&self, l: usize) -> Option<u8> {
        self.label_to_part
            .iter()
            .find(|(_, t)| **t == LabelTarget::Part(l))
            .map(|(lab, _)| *lab)
    }

    pub fn background_label(&self) -> Option<u8> {
        self.label_to_part
            .iter()
            .find(|(_, t)| **t == LabelTarget::Background)
            .map(|(lab, _)| *lab)
    }

    pub fn to_json(&self) -> String {
        let doc = SchemeDoc {
            name: self.name.clone(),
            parts: self.parts.clone(),
            label_to_part: self
                .label_to_part
                .iter()
                .map(|(lab, t)| {
                    let v = match t {
                        LabelTarget::Part(l) => self.parts[*l].clone(),
                        LabelTarget::Background => BACKGROUND.to_string(),
                    };
                    (lab.to_string(), v)
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("scheme serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let doc: SchemeDoc = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let mut map = BTreeMap::new();
        for (lab, part) in &doc.label_to_part {
            let label: u8 = lab
                .parse()
                .map_err(|_| format!("label '{lab}' is not an integer in 0..=255"))?;
            let target = if part == BACKGROUND {
                LabelTarget::Background
            } else {
                let idx = doc
                    .parts
                    .iter()
                    .position(|p| p == part)
                    .ok_or_else(|| format!("label {label} maps to unknown part '{part}'"))?;
                LabelTarget::Part(idx)
            };
            map.insert(label, target);
        }
        Self::new(doc.name, doc.parts, map).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|r| Error::format(path, r))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    // 256-entry lookup: Some(Some(l)) part, Some(None) background, None unknown.
    fn lookup_table(&self) -> [Option<Option<usize>>; 256] {
        let mut table = [None; 256];
        for (&lab, t) in &self.label_to_part {
            table[lab as usize] = Some(match t {
                LabelTarget::Part(l) => Some(*l),
                LabelTarget::Background => None,
            });
        }
        table
    }
}

/// Argmax label map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl SegmentationMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Dimension {
                what: "segmentation label count",
                expected: height * width,
                actual: labels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    /// Checks every label against the scheme's domain.
    pub fn validate(&self, scheme: &PartScheme) -> Result<()> {
        let table = scheme.lookup_table();
        match self.labels.iter().find(|&&l| table[l as usize].is_none()) {
            Some(&label) => Err(Error::UnknownLabel {
                label,
                scheme: scheme.name.clone(),
            }),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.labels.len());
        out.extend_from_slice(SEG_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.labels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 14 || &bytes[..6] != SEG_MAGIC {
            return Err("missing PVSEG1 header".into());
        }
        let h = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let body = &bytes[14..];
        if body.len() != h * w {
            return Err(format!(
                "expected {} label bytes for {h}x{w}, found {}",
                h * w,
                body.len()
            ));
        }
        Ok(Self {
            height: h,
            width: w,
            labels: body.to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|r| Error::format(path, r))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Half-open pixel rectangle of one grid cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellRect {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

fn axis_range(extent: usize, cells: usize, idx: usize) -> Range<usize> {
    (idx * extent / cells)..((idx + 1) * extent / cells)
}

/// Pixel rectangle of cell `(i, j)` (0-based) in an `rows × cols` grid over
/// a `height × width` image. Cell edges sit at `floor(k·H/I)`, so the cells
/// tile the image exactly.
pub fn grid_cell_bounds(
    height: usize,
    width: usize,
    rows: usize,
    cols: usize,
    i: usize,
    j: usize,
) -> Result<CellRect> {
    check_grid(height, width, rows, cols)?;
    if i >= rows || j >= cols {
        return Err(Error::arg(format!(
            "cell ({i}, {j}) outside {rows}x{cols} grid"
        )));
    }
    Ok(CellRect {
        rows: axis_range(height, rows, i),
        cols: axis_range(width, cols, j),
    })
}

fn check_grid(height: usize, width: usize, rows: usize, cols: usize) -> Result<()> {
    if rows == 0 || cols == 0 {
        return Err(Error::arg("grid dimensions must be at least 1x1"));
    }
    if rows > height || cols > width {
        return Err(Error::arg(format!(
            "{rows}x{cols} grid is finer than the {height}x{width} image"
        )));
    }
    Ok(())
}

/// Per-cell pixel counts: `part_counts[(l·I + i)·J + j]` and `totals[i·J + j]`.
struct Tally {
    part_counts: Vec<u32>,
    totals: Vec<u32>,
}

fn tally(seg: &SegmentationMap, scheme: &PartScheme, rows: usize, cols: usize) -> Result<Tally> {
    check_grid(seg.height, seg.width, rows, cols)?;
    let table = scheme.lookup_table();
    let parts = scheme.num_parts();
    let cells = rows * cols;
    let mut part_counts = vec![0u32; parts * cells];
    let mut totals = vec![0u32; cells];

    let col_cell: Vec<usize> = (0..cols)
        .flat_map(|j| std::iter::repeat_n(j, axis_range(seg.width, cols, j).len()))
        .collect();
    for i in 0..rows {
        for r in axis_range(seg.height, rows, i) {
            let row = &seg.labels[r * seg.width..(r + 1) * seg.width];
            for (&label, &j) in row.iter().zip(&col_cell) {
                let cell = i * cols + j;
                totals[cell] += 1;
                match table[label as usize] {
                    Some(Some(l)) => part_counts[l * cells + cell] += 1,
                    Some(None) => {}
                    None => {
                        return Err(Error::UnknownLabel {
                            label,
                            scheme: scheme.name.clone(),
                        })
                    }
                }
            }
        }
    }
    Ok(Tally {
        part_counts,
        totals,
    })
}

/// Per-part distribution of pixels over grid cells.
#[derive(Clone, Debug, PartialEq)]
pub struct GridWeightMap {
    rows: usize,
    cols: usize,
    parts: usize,
    weights: Vec<f64>,
    pixel_counts: Vec<u32>,
    present: Vec<bool>,
}

impl GridWeightMap {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn num_parts(&self) -> usize {
        self.parts
    }

    pub fn weight(&self, l: usize, i: usize, j: usize) -> f64 {
        self.weights[(l * self.rows + i) * self.cols + j]
    }

    pub fn pixel_count(&self, l: usize, i: usize, j: usize) -> u32 {
        self.pixel_counts[(l * self.rows + i) * self.cols + j]
    }

    /// Weights of part `l`, row-major over cells.
    pub fn part_weights(&self, l: usize) -> &[f64] {
        let cells = self.rows * self.cols;
        &self.weights[l * cells..(l + 1) * cells]
    }

    pub fn is_present(&self, l: usize) -> bool {
        self.present[l]
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    /// Builds a map directly from per-part cell weights (`L·I·J`, part-major).
    /// Used where weights come from somewhere other than a label map.
    pub fn from_weights(rows: usize, cols: usize, parts: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != parts * rows * cols {
            return Err(Error::Dimension {
                what: "grid weight count",
                expected: parts * rows * cols,
                actual: weights.len(),
            });
        }
        let cells = rows * cols;
        let present = (0..parts)
            .map(|l| weights[l * cells..(l + 1) * cells].iter().any(|&w| w != 0.0))
            .collect();
        Ok(Self {
            rows,
            cols,
            parts,
            weights,
            pixel_counts: vec![0; parts * cells],
            present,
        })
    }
}

/// Per-cell composition: fraction of each cell's pixels in each part.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPartFractions {
    rows: usize,
    cols: usize,
    parts: usize,
    fractions: Vec<f64>,
    part_counts: Vec<u32>,
    totals: Vec<u32>,
}

impl GridPartFractions {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn num_parts(&self) -> usize {
        self.parts
    }

    pub fn fraction(&self, i: usize, j: usize, l: usize) -> f64 {
        self.fractions[(i * self.cols + j) * self.parts + l]
    }

    /// The `L` part fractions of cell `(i, j)`.
    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.cols + j) * self.parts;
        &self.fractions[start..start + self.parts]
    }

    pub fn grid_pixel_total(&self, i: usize, j: usize) -> u32 {
        self.totals[i * self.cols + j]
    }

    pub fn part_count(&self, i: usize, j: usize, l: usize) -> u32 {
        self.part_counts[(i * self.cols + j) * self.parts + l]
    }

    /// Foreground part with the most pixels in the cell; ties go to the
    /// lower part index. `None` when the cell is all background.
    pub fn dominant_part(&self, i: usize, j: usize) -> Option<usize> {
        let start = (i * self.cols + j) * self.parts;
        let counts = &self.part_counts[start..start + self.parts];
        let (best, &n) = counts
            .iter()
            .enumerate()
            .fold((0, &0u32), |acc, (l, c)| if *c > *acc.1 { (l, c) } else { acc });
        (n > 0).then_some(best)
    }
}

/// Tallies part pixels per cell and normalizes each part over the grid.
pub fn compute_grid_weight_map(
    seg: &SegmentationMap,
    scheme: &PartScheme,
    rows: usize,
    cols: usize,
) -> Result<GridWeightMap> {
    let Tally { part_counts, .. } = tally(seg, scheme, rows, cols)?;
    let parts = scheme.num_parts();
    let cells = rows * cols;
    let mut weights = vec![0.0; parts * cells];
    let mut present = vec![false; parts];
    for l in 0..parts {
        let counts = &part_counts[l * cells..(l + 1) * cells];
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        if total == 0 {
            continue;
        }
        present[l] = true;
        for (w, &c) in weights[l * cells..(l + 1) * cells].iter_mut().zip(counts) {
            *w = c as f64 / total as f64;
        }
    }
    Ok(GridWeightMap {
        rows,
        cols,
        parts,
        weights,
        pixel_counts: part_counts,
        present,
    })
}

/// Fraction of each cell's pixels (background included in the denominator)
/// that belong to each part.
pub fn compute_grid_part_fractions(
    seg: &SegmentationMap,
    scheme: &PartScheme,
    rows: usize,
    cols: usize,
) -> Result<GridPartFractions> {
    let Tally {
        part_counts,
        totals,
    } = tally(seg, scheme, rows, cols)?;
    let parts = scheme.num_parts();
    let cells = rows * cols;
    let mut fractions = vec![0.0; cells * parts];
    let mut cell_major = vec![0u32; cells * parts];
    for cell in 0..cells {
        for l in 0..parts {
            let n = part_counts[l * cells + cell];
            cell_major[cell * parts + l] = n;
            if totals[cell] > 0 {
                fractions[cell * parts + l] = n as f64 / totals[cell] as f64;
            }
        }
    }
    Ok(GridPartFractions {
        rows,
        cols,
        parts,
        fractions,
        part_counts: cell_major,
        totals,
    })
}
