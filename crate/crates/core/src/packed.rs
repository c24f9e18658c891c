//! Compressed 2:4 weights and the reference sparse GEMM that executes them.
//!
//! A packed weight stores, in permuted column order, the two kept f16 values
//! of every group of four plus a 4-bit index nibble per group. Within a
//! nibble bits `[1:0]` hold the position of the first kept value and bits
//! `[3:2]` the second (strictly increasing). Groups are numbered row-major
//! (`row * groups_per_row + group`); group `2k` sits in the low nibble of
//! index byte `k`, group `2k + 1` in the high nibble. An odd total leaves the
//! final high nibble zero.
//!
//! The channel order is applied to activations at execution time by a gather
//! (`X_perm[:, j] = X[:, order[j]]`). Folding it into the producing layer's
//! output rows would remove the gather but is not done here.
//!
//! ESPK file layout (little-endian):
//!
//! ```text
//! magic "ESPK" | version u32 = 1 | rows u64 | cols u64 | n_keep u8 | m_group u8
//! | perm_len u64 | perm u32 * perm_len | values f16 * (rows*cols/2) | indices u8 * ceil(rows*cols/8)
//! ```

use std::fmt;
use std::fs;
use std::path::Path;

use half::f16;
use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pattern::SparsityPattern;
use crate::pruner::{PruneResult, PrunedLayer};
use crate::shuffle::is_bijection;

pub const PACK_MAGIC: &[u8; 4] = b"ESPK";
pub const PACK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PackedSparseWeight {
    rows: usize,
    cols: usize,
    pattern: SparsityPattern,
    values: Vec<f16>,
    indices: Vec<u8>,
    permutation: Vec<u32>,
}

/// A broken invariant found in a packed weight.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    UnsupportedPattern(SparsityPattern),
    ColumnsNotGrouped {
        cols: usize,
    },
    PermutationLength {
        len: usize,
        cols: usize,
    },
    PermutationNotBijection,
    IndexOrder {
        row: usize,
        group: usize,
        first: u8,
        second: u8,
    },
    PaddingNotZero,
    NonFiniteValue {
        index: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnsupportedPattern(p) => {
                write!(f, "unsupported pattern {p} (only 2:4 packs)")
            }
            Violation::ColumnsNotGrouped { cols } => write!(f, "{cols} columns not divisible by 4"),
            Violation::PermutationLength { len, cols } => {
                write!(f, "permutation has {len} entries for {cols} columns")
            }
            Violation::PermutationNotBijection => write!(f, "permutation is not a bijection"),
            Violation::IndexOrder {
                row,
                group,
                first,
                second,
            } => write!(
                f,
                "index nibble at row {row} group {group} has positions ({first}, {second}); \
                 expected distinct and increasing"
            ),
            Violation::PaddingNotZero => write!(f, "trailing index nibble is not zero"),
            Violation::NonFiniteValue { index } => write!(f, "value {index} is not finite"),
        }
    }
}

#[inline]
fn nibble(indices: &[u8], group: usize) -> u8 {
    let byte = indices[group / 2];
    if group.is_multiple_of(2) {
        byte & 0x0f
    } else {
        byte >> 4
    }
}

fn index_bytes(groups: usize) -> usize {
    groups.div_ceil(2)
}

impl PackedSparseWeight {
    /// Packs a weight given in permuted column order together with its
    /// permuted-space mask.
    pub fn pack_permuted(
        weight_perm: ArrayView2<'_, f32>,
        mask_perm: ArrayView2<'_, bool>,
        order: &[usize],
    ) -> Result<Self> {
        let (rows, cols) = weight_perm.dim();
        if mask_perm.dim() != (rows, cols) {
            return Err(Error::Shape(format!(
                "mask {:?} vs weight {:?}",
                mask_perm.shape(),
                weight_perm.shape()
            )));
        }
        let groups_per_row = SparsityPattern::TWO_FOUR.check_channels(cols)?;
        if order.len() != cols || !is_bijection(order) {
            return Err(Error::InvalidArgument(format!(
                "order must be a permutation of 0..{cols}"
            )));
        }
        let groups = rows * groups_per_row;
        let mut values = Vec::with_capacity(groups * 2);
        let mut indices = vec![0u8; index_bytes(groups)];
        for r in 0..rows {
            for g in 0..groups_per_row {
                let kept: Vec<usize> = (0..4).filter(|&p| mask_perm[[r, g * 4 + p]]).collect();
                let [p0, p1] = kept[..] else {
                    return Err(Error::PackInvariant(format!(
                        "row {r} group {g} keeps {} entries, expected 2",
                        kept.len()
                    )));
                };
                values.push(f16::from_f32(weight_perm[[r, g * 4 + p0]]));
                values.push(f16::from_f32(weight_perm[[r, g * 4 + p1]]));
                let code = (p0 as u8) | ((p1 as u8) << 2);
                let gi = r * groups_per_row + g;
                indices[gi / 2] |= if gi % 2 == 0 { code } else { code << 4 };
            }
        }
        Ok(PackedSparseWeight {
            rows,
            cols,
            pattern: SparsityPattern::TWO_FOUR,
            values,
            indices,
            permutation: order.iter().map(|&c| c as u32).collect(),
        })
    }

    /// Packs a 2:4 pruning result.
    pub fn pack(result: &PruneResult) -> Result<Self> {
        if !result.pattern.is_two_four() {
            return Err(Error::Pattern(format!(
                "only 2:4 results can be packed, got {}",
                result.pattern
            )));
        }
        let w = result.pruned_weight.to_matrix()?;
        let w_perm = w.select(Axis(1), &result.permutation.order);
        Self::pack_permuted(
            w_perm.view(),
            result.mask_permuted.view(),
            &result.permutation.order,
        )
    }

    /// Packs a pruned layer read back from disk.
    pub fn pack_layer(layer: &PrunedLayer) -> Result<Self> {
        if !layer.pattern.is_two_four() {
            return Err(Error::Pattern(format!(
                "only 2:4 layers can be packed, got {}",
                layer.pattern
            )));
        }
        let w = layer.weight.to_matrix()?;
        let w_perm = layer.permutation.permute_columns(w.view());
        Self::pack_permuted(
            w_perm.view(),
            layer.mask_permuted().view(),
            &layer.permutation.order,
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pattern(&self) -> SparsityPattern {
        self.pattern
    }

    pub fn values(&self) -> &[f16] {
        &self.values
    }

    pub fn indices(&self) -> &[u8] {
        &self.indices
    }

    pub fn permutation(&self) -> &[u32] {
        &self.permutation
    }

    pub fn order(&self) -> Vec<usize> {
        self.permutation.iter().map(|&c| c as usize).collect()
    }

    fn groups_per_row(&self) -> usize {
        self.cols / 4
    }

    /// Kept positions `(first, second)` of a group.
    pub fn group_positions(&self, row: usize, group: usize) -> (usize, usize) {
        let code = nibble(&self.indices, row * self.groups_per_row() + group);
        ((code & 0b11) as usize, (code >> 2) as usize)
    }

    /// Checks every structural invariant and lists what is broken.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if !self.pattern.is_two_four() {
            out.push(Violation::UnsupportedPattern(self.pattern));
            return out;
        }
        if !self.cols.is_multiple_of(4) {
            out.push(Violation::ColumnsNotGrouped { cols: self.cols });
            return out;
        }
        if self.permutation.len() != self.cols {
            out.push(Violation::PermutationLength {
                len: self.permutation.len(),
                cols: self.cols,
            });
        } else if !is_bijection(&self.order()) {
            out.push(Violation::PermutationNotBijection);
        }
        let gpr = self.groups_per_row();
        for r in 0..self.rows {
            for g in 0..gpr {
                let (a, b) = self.group_positions(r, g);
                if a >= b {
                    out.push(Violation::IndexOrder {
                        row: r,
                        group: g,
                        first: a as u8,
                        second: b as u8,
                    });
                }
            }
        }
        let groups = self.rows * gpr;
        if groups % 2 == 1 && self.indices[groups / 2] >> 4 != 0 {
            out.push(Violation::PaddingNotZero);
        }
        if let Some(index) = self.values.iter().position(|v| !v.is_finite()) {
            out.push(Violation::NonFiniteValue { index });
        }
        out
    }

    /// Dense f16 weight in permuted column order; pruned slots are `+0`.
    pub fn unpack_permuted(&self) -> Array2<f16> {
        let mut out = Array2::from_elem((self.rows, self.cols), f16::ZERO);
        let gpr = self.groups_per_row();
        for r in 0..self.rows {
            for g in 0..gpr {
                let (a, b) = self.group_positions(r, g);
                let v = (r * gpr + g) * 2;
                out[[r, g * 4 + a]] = self.values[v];
                out[[r, g * 4 + b]] = self.values[v + 1];
            }
        }
        out
    }

    /// Dense f32 weight in the original column order.
    pub fn to_dense(&self) -> Array2<f32> {
        let perm = self.unpack_permuted().mapv(f16::to_f32);
        let mut inv = vec![0usize; self.cols];
        for (pos, &c) in self.permutation.iter().enumerate() {
            inv[c as usize] = pos;
        }
        perm.select(Axis(1), &inv)
    }

    /// `X · Wᵀ` for `X: [T, cols]`, touching only kept weights.
    ///
    /// Activations are gathered into permuted order first; accumulation is f32.
    pub fn sparse_gemm(&self, x: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
        if x.ncols() != self.cols {
            return Err(Error::Shape(format!(
                "activations have {} columns, weight expects {}",
                x.ncols(),
                self.cols
            )));
        }
        let gpr = self.groups_per_row();
        let values: Vec<f32> = self.values.iter().map(|v| v.to_f32()).collect();
        let offsets: Vec<(usize, usize)> = (0..self.rows * gpr)
            .map(|gi| {
                let code = nibble(&self.indices, gi);
                let base = (gi % gpr) * 4;
                (base + (code & 0b11) as usize, base + (code >> 2) as usize)
            })
            .collect();
        // permuted activations, channel-major so the inner loop runs over tokens
        let t = x.nrows();
        let mut xp = vec![0.0f32; self.cols * t];
        for (j, &c) in self.permutation.iter().enumerate() {
            for (dst, &v) in xp[j * t..(j + 1) * t].iter_mut().zip(x.column(c as usize)) {
                *dst = v;
            }
        }
        let mut out_t = vec![0.0f32; self.rows * t];
        out_t
            .par_chunks_mut(t.max(1))
            .enumerate()
            .for_each(|(r, acc)| {
                let base = r * gpr;
                for g in 0..gpr {
                    let (a, b) = offsets[base + g];
                    let (va, vb) = (values[(base + g) * 2], values[(base + g) * 2 + 1]);
                    let xa = &xp[a * t..(a + 1) * t];
                    let xb = &xp[b * t..(b + 1) * t];
                    for ((o, &p), &q) in acc.iter_mut().zip(xa).zip(xb) {
                        *o += va * p + vb * q;
                    }
                }
            });
        Ok(Array2::from_shape_vec((self.rows, t), out_t)
            .expect("buffer matches shape")
            .reversed_axes()
            .as_standard_layout()
            .into_owned())
    }

    /// FLOP and byte accounting for a batch of `tokens` rows.
    pub fn account(&self, tokens: usize) -> Accounting {
        let dense_macs = (tokens * self.rows * self.cols) as u64;
        let n = self.pattern.n_keep() as u64;
        let m = self.pattern.m_group() as u64;
        Accounting {
            flops_dense: 2 * dense_macs,
            flops_sparse: 2 * dense_macs * n / m,
            flop_ratio: n as f64 / m as f64,
            bytes_dense: (self.rows * self.cols * 2) as u64,
            bytes_sparse: (self.values.len() * 2 + self.indices.len()) as u64,
            header_bytes: self.header_len() as u64,
        }
    }

    fn header_len(&self) -> usize {
        4 + 4 + 8 + 8 + 1 + 1 + 8 + 4 * self.permutation.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(self.header_len() + 2 * self.values.len() + self.indices.len());
        out.extend_from_slice(PACK_MAGIC);
        out.extend_from_slice(&PACK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        out.push(self.pattern.n_keep() as u8);
        out.push(self.pattern.m_group() as u8);
        out.extend_from_slice(&(self.permutation.len() as u64).to_le_bytes());
        for &c in &self.permutation {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.indices);
        out
    }

    /// Parses the byte layout without checking [`Self::validate`] invariants.
    pub fn decode_unchecked(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != PACK_MAGIC {
            return Err(Error::Format("bad magic, expected \"ESPK\"".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != PACK_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let rows = cur.usize()?;
        let cols = cur.usize()?;
        let (n, m) = (cur.take(1)?[0] as usize, cur.take(1)?[0] as usize);
        let pattern = SparsityPattern::new(n, m)?;
        if !pattern.is_two_four() {
            return Err(Error::Format(format!("unsupported pattern {pattern}")));
        }
        if cols % 4 != 0 {
            return Err(Error::Format(format!("{cols} columns not divisible by 4")));
        }
        let perm_len = cur.usize()?;
        let permutation = cur
            .take(
                perm_len
                    .checked_mul(4)
                    .ok_or_else(|| Error::Format("permutation too long".into()))?,
            )?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let groups = rows
            .checked_mul(cols / 4)
            .ok_or_else(|| Error::Format("matrix too large".into()))?;
        let values = cur
            .take(groups * 4)?
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let indices = cur.take(index_bytes(groups))?.to_vec();
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        Ok(PackedSparseWeight {
            rows,
            cols,
            pattern,
            values,
            indices,
            permutation,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let w = Self::decode_unchecked(bytes)?;
        let violations = w.validate();
        if !violations.is_empty() {
            let msg: Vec<String> = violations.iter().map(ToString::to_string).collect();
            return Err(Error::PackInvariant(msg.join("; ")));
        }
        Ok(w)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated {
                expected: (self.pos as u64).saturating_add(n as u64),
                actual: self.bytes.len() as u64,
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn usize(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Format(format!("size {v} too large")))
    }
}

pub fn write_packed(w: &PackedSparseWeight, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, w.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_packed(path: impl AsRef<Path>) -> Result<PackedSparseWeight> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    PackedSparseWeight::decode(&bytes)
}

pub fn read_packed_unchecked(path: impl AsRef<Path>) -> Result<PackedSparseWeight> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    PackedSparseWeight::decode_unchecked(&bytes)
}

/// FLOP and memory figures for one packed matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accounting {
    pub flops_sparse: u64,
    pub flops_dense: u64,
    pub flop_ratio: f64,
    /// Values plus index bytes, header excluded.
    pub bytes_sparse: u64,
    /// Dense f16 storage of the same matrix.
    pub bytes_dense: u64,
    pub header_bytes: u64,
}

impl Accounting {
    pub fn memory_ratio(&self) -> f64 {
        self.bytes_sparse as f64 / self.bytes_dense as f64
    }

    pub fn memory_saving(&self) -> f64 {
        1.0 - self.memory_ratio()
    }
}

/// `X[:, order]`.
pub fn gather_columns(x: ArrayView2<'_, f32>, order: &[usize]) -> Array2<f32> {
    x.select(Axis(1), order)
}

/// Plain dense `X · Wᵀ` with f32 accumulation.
pub fn dense_gemm(w: ArrayView2<'_, f32>, x: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
    if w.ncols() != x.ncols() {
        return Err(Error::Shape(format!(
            "weight {:?} vs activations {:?}",
            w.shape(),
            x.shape()
        )));
    }
    Ok(x.dot(&w.t()))
}
