use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::SimError;
use crate::tensor::Tensor;
use crate::tiler::{AttentionShape, Sharing};

/// Dense operands of one attention block in normalized layout:
/// `q: [Hq, Lq, d]`, `k: [Hkv, Lk, d]`, `v: [Hkv, Lk, dv]`,
/// `bias`/`mask: [1 | Hq, Lq, Lk]`. Query head `h` reads kv head
/// `h / (Hq / Hkv)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInputs {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub bias: Option<Tensor>,
    pub mask: Option<Tensor>,
}

impl AttentionInputs {
    pub fn new(q: Tensor, k: Tensor, v: Tensor, bias: Option<Tensor>, mask: Option<Tensor>) -> Result<Self, SimError> {
        let inputs = Self { q, k, v, bias, mask };
        inputs.shape()?;
        Ok(inputs)
    }

    /// Logical shape implied by the operand dims.
    pub fn shape(&self) -> Result<AttentionShape, SimError> {
        let rank3 = |t: &Tensor, name: &str| -> Result<[usize; 3], SimError> {
            match *t.dims() {
                [a, b, c] => Ok([a, b, c]),
                _ => Err(SimError::ShapeMismatch(format!("{name} must be rank 3, got {:?}", t.dims()))),
            }
        };
        let [hq, lq, d] = rank3(&self.q, "q")?;
        let [hkv, lk, dk] = rank3(&self.k, "k")?;
        let [hv, lkv, dv] = rank3(&self.v, "v")?;
        if dk != d {
            return Err(SimError::ShapeMismatch(format!("q head dim {d} vs k head dim {dk}")));
        }
        if (hv, lkv) != (hkv, lk) {
            return Err(SimError::ShapeMismatch(format!("v {:?} does not match k {:?}", self.v.dims(), self.k.dims())));
        }
        if hkv == 0 || hq % hkv != 0 {
            return Err(SimError::ShapeMismatch(format!("{hq} query heads not divisible by {hkv} kv heads")));
        }
        let extra = |t: &Option<Tensor>, name: &str| -> Result<Option<Sharing>, SimError> {
            let Some(t) = t else { return Ok(None) };
            let [h, r, c] = rank3(t, name)?;
            if (r, c) != (lq, lk) || (h != 1 && h != hq) {
                return Err(SimError::ShapeMismatch(format!("{name} {:?} does not broadcast to [{hq}, {lq}, {lk}]", t.dims())));
            }
            Ok(Some(if h == 1 && hq != 1 { Sharing::Shared } else { Sharing::PerHead }))
        };
        Ok(AttentionShape {
            heads: hq,
            kv_heads: hkv,
            lq,
            lk,
            d,
            dv,
            bias: extra(&self.bias, "bias")?,
            mask: extra(&self.mask, "mask")?,
            k_transpose: false,
        })
    }

    /// Seeded random operands. Mask entries are 0 or a large negative value
    /// (never masking a whole row); bias entries are small reals.
    pub fn random(shape: &AttentionShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Tensor::random(&[shape.heads, shape.lq, shape.d], &mut rng, 1.0);
        let k = Tensor::random(&[shape.kv_heads, shape.lk, shape.d], &mut rng, 1.0);
        let v = Tensor::random(&[shape.kv_heads, shape.lk, shape.dv], &mut rng, 1.0);
        let extra_heads = |s: Sharing| if s == Sharing::Shared { 1 } else { shape.heads };
        let bias = shape.bias.map(|s| Tensor::random(&[extra_heads(s), shape.lq, shape.lk], &mut rng, 0.5));
        let mask = shape.mask.map(|s| {
            let dims = [extra_heads(s), shape.lq, shape.lk];
            let raw = Tensor::random(&dims, &mut rng, 1.0);
            Tensor::from_fn(&dims, |i| {
                if i[2] == 0 || raw.get(i) > -0.4 {
                    0.0
                } else {
                    -1e4
                }
            })
        });
        Self { q, k, v, bias, mask }
    }

    /// Little-endian bytes of every operand, in a fixed order.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let tensors = [Some(&self.q), Some(&self.k), Some(&self.v), self.bias.as_ref(), self.mask.as_ref()];
        for t in tensors {
            match t {
                None => out.push(0),
                Some(t) => {
                    out.push(1);
                    for d in t.dims() {
                        out.extend((*d as u64).to_le_bytes());
                    }
                    for x in t.data() {
                        out.extend(x.to_le_bytes());
                    }
                }
            }
        }
        out
    }
}

/// Head `h` of an optional `[1 | H, Lq, Lk]` operand.
pub(crate) fn head_slice(t: &Option<Tensor>, h: usize) -> Option<&[f64]> {
    t.as_ref().map(|t| t.matrix(if t.dims()[0] == 1 { 0 } else { h }))
}
