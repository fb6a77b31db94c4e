//! Synthetic data generators: a deterministic digit look-alike source for
//! environments without the real MNIST files, and two-task toy problems
//! with analytically known gradient geometry for penalty tests.

use super::{DigitSource, MnistDigit, DIGIT_SIZE};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 5×7 digit glyphs, one row per line, MSB-left in the low 5 bits.
const GLYPHS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

const SCALE: usize = 3;
const GLYPH_W: usize = 5 * SCALE;
const GLYPH_H: usize = 7 * SCALE;

/// Deterministic digit images varying in position, stroke intensity, and
/// background noise: `per_class` instances of each class 0..=9, in class
/// order. A stand-in for real MNIST with the same type contract.
pub fn synthetic_mnist(per_class: usize, seed: u64) -> Result<Vec<MnistDigit>> {
    if per_class == 0 {
        return Err(Error::InvalidArgument(
            "per_class must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b'm' as u64]));
    let mut out = Vec::with_capacity(per_class * 10);
    for class in 0..10u8 {
        for _ in 0..per_class {
            let mut canvas = [0u8; DIGIT_SIZE * DIGIT_SIZE];
            let row_off = rng.gen_range(0..=DIGIT_SIZE - GLYPH_H);
            let col_off = rng.gen_range(0..=DIGIT_SIZE - GLYPH_W);
            let base: u8 = rng.gen_range(170..=255);
            let glyph = &GLYPHS[class as usize];
            for (gr, bits) in glyph.iter().enumerate() {
                for gc in 0..5 {
                    if bits & (1 << (4 - gc)) == 0 {
                        continue;
                    }
                    let value = base.saturating_sub(rng.gen_range(0..40));
                    for dr in 0..SCALE {
                        for dc in 0..SCALE {
                            let r = row_off + gr * SCALE + dr;
                            let c = col_off + gc * SCALE + dc;
                            canvas[r * DIGIT_SIZE + c] = value;
                        }
                    }
                }
            }
            for px in canvas.iter_mut() {
                if *px == 0 && rng.gen::<f64>() < 0.03 {
                    *px = rng.gen_range(1..=30);
                }
            }
            let data: Vec<f64> = canvas.iter().map(|&b| b as f64 / 255.0).collect();
            let image = Tensor::new(vec![DIGIT_SIZE, DIGIT_SIZE], data)?;
            out.push(MnistDigit::new(image, class)?);
        }
    }
    Ok(out)
}

/// Convenience: a [`DigitSource`] over synthetic digits.
pub fn synthetic_source(per_class: usize, seed: u64) -> Result<DigitSource> {
    DigitSource::new(synthetic_mnist(per_class, seed)?)
}

// ── toy two-task problems ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyKind {
    Orthogonal,
    Aligned,
    Conflicting,
}

/// Two quadratic objectives over one shared parameter vector. Loss t is
/// `sign_t · ½‖A_t w − b_t‖²`; its gradient is `sign_t · A_tᵀ(A_t w − b_t)`.
#[derive(Debug, Clone)]
pub struct TwoTaskToy {
    pub a1: Tensor,
    pub b1: Tensor,
    pub a2: Tensor,
    pub b2: Tensor,
    pub sign2: f64,
    pub dim: usize,
}

impl TwoTaskToy {
    /// Both losses as graph nodes; `w` must be a `(dim, 1)` node.
    pub fn losses(&self, g: &mut Graph, w: NodeId) -> Result<(NodeId, NodeId)> {
        if g.value(w).shape() != [self.dim, 1] {
            return Err(Error::shape(
                "toy losses",
                format!("w must be ({},1), got {:?}", self.dim, g.value(w).shape()),
            ));
        }
        let l1 = Self::quad(g, &self.a1, &self.b1, w, 1.0)?;
        let l2 = Self::quad(g, &self.a2, &self.b2, w, self.sign2)?;
        Ok((l1, l2))
    }

    fn quad(g: &mut Graph, a: &Tensor, b: &Tensor, w: NodeId, sign: f64) -> Result<NodeId> {
        let an = g.constant(a.clone());
        let bn = g.constant(b.clone());
        let pred = g.matmul(an, w)?;
        let r = g.sub(pred, bn)?;
        let sq = g.square(r)?;
        let s = g.sum(sq, &[], false)?;
        g.mul_scalar(s, 0.5 * sign)
    }

    /// Closed-form gradient of loss `which` (0 or 1) at `w`, flattened.
    pub fn gradient(&self, which: usize, w: &Tensor) -> Vec<f64> {
        let (a, b, sign) = match which {
            0 => (&self.a1, &self.b1, 1.0),
            _ => (&self.a2, &self.b2, self.sign2),
        };
        let k = a.shape()[0];
        let d = a.shape()[1];
        let mut residual = vec![0.0; k];
        for i in 0..k {
            let mut acc = -b.data()[i];
            for j in 0..d {
                acc += a.data()[i * d + j] * w.data()[j];
            }
            residual[i] = acc;
        }
        let mut grad = vec![0.0; d];
        for j in 0..d {
            for i in 0..k {
                grad[j] += sign * a.data()[i * d + j] * residual[i];
            }
        }
        grad
    }
}

/// Construct a toy pair whose gradient cosine is 0, +1, or −1 at every
/// point: disjoint-coordinate quadratic forms for `Orthogonal`, identical
/// forms for `Aligned`, the negated form for `Conflicting`.
pub fn synthetic_two_task(kind: ToyKind, dim: usize, rng: &mut impl Rng) -> Result<TwoTaskToy> {
    if dim < 2 {
        return Err(Error::InvalidArgument(format!(
            "toy dimension must be at least 2, got {dim}"
        )));
    }
    let coeff = |rng: &mut dyn rand::RngCore| -> f64 {
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        sign * rng.gen_range(0.5..1.5)
    };
    match kind {
        ToyKind::Orthogonal => {
            let h = dim / 2;
            let mut a1 = Tensor::zeros(&[h, dim]);
            for i in 0..h {
                a1.set(&[i, i], coeff(rng));
            }
            let k2 = dim - h;
            let mut a2 = Tensor::zeros(&[k2, dim]);
            for i in 0..k2 {
                a2.set(&[i, h + i], coeff(rng));
            }
            let b1 = Tensor::new(vec![h, 1], (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
            let b2 =
                Tensor::new(vec![k2, 1], (0..k2).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
            Ok(TwoTaskToy {
                a1,
                b1,
                a2,
                b2,
                sign2: 1.0,
                dim,
            })
        }
        ToyKind::Aligned | ToyKind::Conflicting => {
            let a = Tensor::new(
                vec![dim, dim],
                (0..dim * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )?;
            let b = Tensor::new(vec![dim, 1], (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
            let sign2 = if kind == ToyKind::Aligned { 1.0 } else { -1.0 };
            Ok(TwoTaskToy {
                a1: a.clone(),
                b1: b.clone(),
                a2: a,
                b2: b,
                sign2,
                dim,
            })
        }
    }
}

/// Independent dense random quadratics; gradient geometry varies with `w`.
pub fn random_two_task(dim: usize, rng: &mut impl Rng) -> Result<TwoTaskToy> {
    if dim < 2 {
        return Err(Error::InvalidArgument(format!(
            "toy dimension must be at least 2, got {dim}"
        )));
    }
    let mk = |rng: &mut dyn rand::RngCore| -> Result<(Tensor, Tensor)> {
        let a = Tensor::new(
            vec![dim, dim],
            (0..dim * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;
        let b = Tensor::new(vec![dim, 1], (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        Ok((a, b))
    };
    let (a1, b1) = mk(rng)?;
    let (a2, b2) = mk(rng)?;
    Ok(TwoTaskToy {
        a1,
        b1,
        a2,
        b2,
        sign2: 1.0,
        dim,
    })
}
