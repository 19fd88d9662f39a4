//! Slicing latent feature maps into voter blocks and hard voting.
//!
//! Canonical scheme names: `ori`, `v3_h`, `v3_v`, `v5`, `v7_h`, `v7_v`,
//! `v10`, `v17`, `v26`, `v37`, `cen10` .. `cen90`. The `v3` variants are
//! plain strip tilings; `v5` is four quadrants plus the whole feature;
//! `v7` is six strips plus the whole feature; `v10`/`v17`/`v26`/`v37` are
//! n×n grids (n = 3..6) plus the whole feature; `cenP` keeps a single
//! centered block covering P percent of the area.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentationScheme {
    /// The untouched feature as a single block.
    Ori,
    /// `x` horizontal strips tiling the feature (no whole-feature block).
    StripsH(usize),
    /// `y` vertical strips tiling the feature.
    StripsV(usize),
    /// Four quadrants plus the whole feature (v5).
    QuadrantsPlusWhole,
    /// Six horizontal strips plus the whole feature (v7_h).
    StripsPlusWholeH(usize),
    /// Six vertical strips plus the whole feature (v7_v).
    StripsPlusWholeV(usize),
    /// n×n grid plus the whole feature (v10/v17/v26/v37 for n=3..6).
    GridPlusWhole(usize),
    /// One centered block covering `percent` of the area; 100 is identity.
    Central(u32),
}

pub const SCHEME_NAMES: &[&str] = &[
    "ori", "v3_h", "v3_v", "v5", "v7_h", "v7_v", "v10", "v17", "v26", "v37", "cen10", "cen20",
    "cen30", "cen40", "cen50", "cen60", "cen70", "cen80", "cen90",
];

impl SegmentationScheme {
    pub fn parse(name: &str) -> Result<Self> {
        use SegmentationScheme::*;
        let scheme = match name {
            "ori" => Ori,
            "v3_h" => StripsH(3),
            "v3_v" => StripsV(3),
            "v5" => QuadrantsPlusWhole,
            "v7_h" => StripsPlusWholeH(6),
            "v7_v" => StripsPlusWholeV(6),
            "v10" => GridPlusWhole(3),
            "v17" => GridPlusWhole(4),
            "v26" => GridPlusWhole(5),
            "v37" => GridPlusWhole(6),
            _ => {
                if let Some(p) = name.strip_prefix("cen").and_then(|p| p.parse::<u32>().ok()) {
                    if p >= 10 && p <= 100 && p % 10 == 0 {
                        return Ok(Central(p));
                    }
                }
                return Err(Error::UnknownScheme(name.to_string(), SCHEME_NAMES.join(", ")));
            }
        };
        Ok(scheme)
    }

    pub fn name(&self) -> String {
        use SegmentationScheme::*;
        match self {
            Ori => "ori".into(),
            StripsH(x) => format!("v{x}_h"),
            StripsV(y) => format!("v{y}_v"),
            QuadrantsPlusWhole => "v5".into(),
            StripsPlusWholeH(x) => format!("v{}_h", x + 1),
            StripsPlusWholeV(y) => format!("v{}_v", y + 1),
            GridPlusWhole(n) => format!("v{}", n * n + 1),
            Central(p) => format!("cen{p}"),
        }
    }

    pub fn voter_count(&self) -> usize {
        use SegmentationScheme::*;
        match self {
            Ori | Central(_) => 1,
            StripsH(x) | StripsV(x) => *x,
            QuadrantsPlusWhole => 5,
            StripsPlusWholeH(x) | StripsPlusWholeV(x) => x + 1,
            GridPlusWhole(n) => n * n + 1,
        }
    }
}

/// One voter block: a rectangle of the feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub row_start: usize,
    pub row_len: usize,
    pub col_start: usize,
    pub col_len: usize,
    pub is_whole: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPlan {
    pub blocks: Vec<Block>,
}

impl BlockPlan {
    pub fn voter_count(&self) -> usize {
        self.blocks.len()
    }
}

/// Strip boundaries: near-equal sizes floor(d/x), the remainder going one
/// extra unit to the last strips (32 rows over 3 strips -> 10, 11, 11).
fn strip_sizes(dim: usize, count: usize) -> Result<Vec<(usize, usize)>> {
    if count == 0 || count > dim {
        return Err(Error::InvalidArgument(format!(
            "cannot split dimension {dim} into {count} strips"
        )));
    }
    let base = dim / count;
    let rem = dim % count;
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    for i in 0..count {
        let len = if i >= count - rem { base + 1 } else { base };
        out.push((start, len));
        start += len;
    }
    Ok(out)
}

/// Centered crop side for an area fraction of p percent.
fn central_side(dim: usize, p: u32) -> usize {
    ((dim as f64) * (p as f64 / 100.0).sqrt()).round() as usize
}

pub fn plan_blocks(scheme: SegmentationScheme, h: usize, w: usize) -> Result<BlockPlan> {
    use SegmentationScheme::*;
    let whole = Block { row_start: 0, row_len: h, col_start: 0, col_len: w, is_whole: true };
    let blocks = match scheme {
        Ori => vec![whole],
        StripsH(x) => strip_sizes(h, x)?
            .into_iter()
            .map(|(r0, rl)| Block { row_start: r0, row_len: rl, col_start: 0, col_len: w, is_whole: false })
            .collect(),
        StripsV(y) => strip_sizes(w, y)?
            .into_iter()
            .map(|(c0, cl)| Block { row_start: 0, row_len: h, col_start: c0, col_len: cl, is_whole: false })
            .collect(),
        QuadrantsPlusWhole => {
            let mut blocks = Vec::with_capacity(5);
            for (r0, rl) in strip_sizes(h, 2)? {
                for (c0, cl) in strip_sizes(w, 2)? {
                    blocks.push(Block { row_start: r0, row_len: rl, col_start: c0, col_len: cl, is_whole: false });
                }
            }
            blocks.push(whole);
            blocks
        }
        StripsPlusWholeH(x) => {
            let mut blocks: Vec<Block> = strip_sizes(h, x)?
                .into_iter()
                .map(|(r0, rl)| Block { row_start: r0, row_len: rl, col_start: 0, col_len: w, is_whole: false })
                .collect();
            blocks.push(whole);
            blocks
        }
        StripsPlusWholeV(y) => {
            let mut blocks: Vec<Block> = strip_sizes(w, y)?
                .into_iter()
                .map(|(c0, cl)| Block { row_start: 0, row_len: h, col_start: c0, col_len: cl, is_whole: false })
                .collect();
            blocks.push(whole);
            blocks
        }
        GridPlusWhole(n) => {
            let mut blocks = Vec::with_capacity(n * n + 1);
            for (r0, rl) in strip_sizes(h, n)? {
                for (c0, cl) in strip_sizes(w, n)? {
                    blocks.push(Block { row_start: r0, row_len: rl, col_start: c0, col_len: cl, is_whole: false });
                }
            }
            blocks.push(whole);
            blocks
        }
        Central(p) => {
            if p < 10 || p > 100 || p % 10 != 0 {
                return Err(Error::InvalidArgument(format!(
                    "central percent must be one of 10..100 step 10, got {p}"
                )));
            }
            if p == 100 {
                vec![whole]
            } else {
                let rl = central_side(h, p);
                let cl = central_side(w, p);
                vec![Block {
                    row_start: (h - rl) / 2,
                    row_len: rl,
                    col_start: (w - cl) / 2,
                    col_len: cl,
                    is_whole: false,
                }]
            }
        }
    };
    Ok(BlockPlan { blocks })
}

/// Cut one `[h,w,c]` feature map into the plan's blocks. The whole-feature
/// block is the untouched input.
pub fn split_feature<T: Element>(x: &Tensor<T>, plan: &BlockPlan) -> Result<Vec<Tensor<T>>> {
    if x.shape().len() != 3 {
        return Err(Error::ShapeMismatch(format!("split_feature: expected [h,w,c], got {:?}", x.shape())));
    }
    let [h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let mut out = Vec::with_capacity(plan.blocks.len());
    for b in &plan.blocks {
        if b.row_start + b.row_len > h || b.col_start + b.col_len > w {
            return Err(Error::InvalidArgument(format!(
                "block {b:?} out of bounds for {h}x{w} feature"
            )));
        }
        let mut data = Vec::with_capacity(b.row_len * b.col_len * c);
        for y in b.row_start..b.row_start + b.row_len {
            let start = (y * w + b.col_start) * c;
            data.extend_from_slice(&x.data()[start..start + b.col_len * c]);
        }
        out.push(Tensor::new(vec![b.row_len, b.col_len, c], data)?);
    }
    Ok(out)
}

/// Centered crop covering `p` percent of the area; `p = 100` is the identity.
pub fn central_crop<T: Element>(x: &Tensor<T>, p: u32) -> Result<Tensor<T>> {
    let plan = plan_blocks(SegmentationScheme::Central(p), x.shape()[0], x.shape()[1])?;
    Ok(split_feature(x, &plan)?.pop().unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Fake,
    Real,
}

impl Label {
    pub fn from_prob_real(p: f64) -> Label {
        if p >= 0.5 {
            Label::Real
        } else {
            Label::Fake
        }
    }

    pub fn as_index(self) -> usize {
        match self {
            Label::Fake => 0,
            Label::Real => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VoteResult {
    pub label: Label,
    /// Per-voter (label, probability of REAL).
    pub per_voter: Vec<(Label, f64)>,
    /// (real votes, fake votes).
    pub tally: (usize, usize),
    pub tiebreak_used: bool,
}

/// Majority vote over per-block labels. An exact tie goes to the side whose
/// voters carry the larger summed winning-class probability.
pub fn hard_vote(per_voter: &[(Label, f64)]) -> Result<VoteResult> {
    if per_voter.is_empty() {
        return Err(Error::InvalidArgument("hard_vote: empty voter list".into()));
    }
    if let Some(&(_, p)) = per_voter.iter().find(|(_, p)| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidArgument(format!("hard_vote: probability {p} outside [0,1]")));
    }
    let real_votes = per_voter.iter().filter(|(l, _)| *l == Label::Real).count();
    let fake_votes = per_voter.len() - real_votes;
    let (label, tiebreak_used) = match real_votes.cmp(&fake_votes) {
        std::cmp::Ordering::Greater => (Label::Real, false),
        std::cmp::Ordering::Less => (Label::Fake, false),
        std::cmp::Ordering::Equal => {
            let real_conf: f64 = per_voter
                .iter()
                .filter(|(l, _)| *l == Label::Real)
                .map(|(_, p)| p)
                .sum();
            let fake_conf: f64 = per_voter
                .iter()
                .filter(|(l, _)| *l == Label::Fake)
                .map(|(_, p)| 1.0 - p)
                .sum();
            (if real_conf >= fake_conf { Label::Real } else { Label::Fake }, true)
        }
    };
    Ok(VoteResult { label, per_voter: per_voter.to_vec(), tally: (real_votes, fake_votes), tiebreak_used })
}
