//! Branch expansion and compression.
//!
//! Expansion pairs every convolution with a zero-initialised branch whose
//! kernel is no larger than the base kernel. The base output goes through a
//! stop-gradient, so only the branch learns. Compression zero-pads the
//! branch kernel to the base size, centred, and adds it to the base kernel;
//! since convolution is linear in the kernel this is an exact fold.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Error, Result};
use crate::nn::{Bindings, ConvLayer, ConvUnit, Model};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Requested branch kernel extents (height × width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchShape {
    #[serde(rename = "1x1")]
    K1x1,
    /// One row, three columns.
    #[serde(rename = "1x3")]
    K1x3,
    #[serde(rename = "3x3")]
    K3x3,
}

impl BranchShape {
    pub const ALL: [BranchShape; 3] = [BranchShape::K1x1, BranchShape::K1x3, BranchShape::K3x3];

    pub fn extents(self) -> (usize, usize) {
        match self {
            BranchShape::K1x1 => (1, 1),
            BranchShape::K1x3 => (1, 3),
            BranchShape::K3x3 => (3, 3),
        }
    }
}

impl fmt::Display for BranchShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (h, w) = self.extents();
        write!(f, "{h}x{w}")
    }
}

impl FromStr for BranchShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1x1" => Ok(BranchShape::K1x1),
            "1x3" => Ok(BranchShape::K1x3),
            "3x3" => Ok(BranchShape::K3x3),
            other => Err(Error::Config(format!("unknown branch shape {other:?}"))),
        }
    }
}

/// Initial values of a fresh branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BranchInit {
    /// Expansion is then an exact no-op on the network function.
    #[default]
    Zero,
    /// Small Gaussian weights, for ablations.
    Normal { std: f64, seed: u64 },
}

/// A frozen base convolution plus a trainable branch with identical output
/// geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchConv<S: Scalar> {
    pub base: ConvLayer<S>,
    pub branch: ConvLayer<S>,
}

impl<S: Scalar> BranchConv<S> {
    /// Attaches a branch of the requested shape, clipped per dimension to the
    /// base kernel. Stride is copied from the base.
    pub fn new(mut base: ConvLayer<S>, shape: BranchShape, init: BranchInit) -> Result<Self> {
        let (kh, kw) = base.kernel_size();
        let (rh, rw) = shape.extents();
        let (bh, bw) = (rh.min(kh), rw.min(kw));
        if (kh - bh) % 2 != 0 || (kw - bw) % 2 != 0 {
            return Err(contract_err!(
                "{bh}x{bw} branch cannot be centred in a {kh}x{kw} kernel"
            ));
        }
        let (oh, ow) = ((kh - bh) / 2, (kw - bw) / 2);
        let (ph, pw) = base.padding;
        if ph < oh || pw < ow {
            return Err(contract_err!(
                "base padding {:?} too small for a {bh}x{bw} branch",
                base.padding
            ));
        }
        let padding = (ph - oh, pw - ow);
        // out = (H + 2p - k) / s + 1 must agree for both paths
        debug_assert_eq!(2 * padding.0 + kh, 2 * ph + bh);
        debug_assert_eq!(2 * padding.1 + kw, 2 * pw + bw);
        let wshape = [base.out_channels(), base.in_channels(), bh, bw];
        let weight = match init {
            BranchInit::Zero => Tensor::zeros(&wshape)?,
            BranchInit::Normal { std, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Tensor::randn_with(&wshape, &mut rng, std)?
            }
        };
        let bias = base.bias.as_ref().map(|b| Tensor::zeros(b.shape())).transpose()?;
        let mut branch = ConvLayer {
            name: format!("{}.branch", base.name),
            weight,
            bias,
            stride: base.stride,
            padding,
        };
        branch.set_trainable(true);
        base.set_trainable(false);
        Ok(Self { base, branch })
    }

    /// `conv(x, sg(w)) + conv(x, w')`: the base kernel is held constant while
    /// gradient still flows through it to `x`.
    pub(crate) fn record(&self, tape: &mut Tape<S>, x: Var, binds: &mut Bindings) -> Result<Var> {
        let b = &self.base;
        let w = binds.bind(tape, format!("{}.weight", b.name), &b.weight);
        let w = tape.stop_gradient(w)?;
        let bias = match &b.bias {
            Some(t) => {
                let v = binds.bind(tape, format!("{}.bias", b.name), t);
                Some(tape.stop_gradient(v)?)
            }
            None => None,
        };
        let base = tape.conv2d(x, w, bias, b.stride, b.padding)?;
        let branch = self.branch.record(tape, x, binds, &self.branch.name)?;
        if tape.shape(base) != tape.shape(branch) {
            return Err(shape_err!(
                "branch output {:?} differs from base {:?}",
                tape.shape(branch),
                tape.shape(base)
            ));
        }
        tape.add(base, branch)
    }

    /// Folds the branch into a single convolution with the base geometry.
    pub fn fuse(&self) -> Result<ConvLayer<S>> {
        let (kh, kw) = self.base.kernel_size();
        let padded = pad_kernel(&self.branch.weight, kh, kw)?;
        let data = self
            .base
            .weight
            .data()
            .iter()
            .zip(padded.data())
            .map(|(&a, &b)| a + b)
            .collect();
        let weight = Tensor::from_vec(self.base.weight.shape(), data)?;
        let bias = match (&self.base.bias, &self.branch.bias) {
            (Some(a), Some(b)) => Some(Tensor::from_vec(
                a.shape(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect(),
            )?),
            (Some(a), None) => Some(a.clone()),
            (None, Some(b)) => Some(b.clone()),
            (None, None) => None,
        };
        let mut fused = ConvLayer {
            name: self.base.name.clone(),
            weight,
            bias,
            stride: self.base.stride,
            padding: self.base.padding,
        };
        fused.set_trainable(true);
        Ok(fused)
    }
}

/// Zero-pads an `O×I×kh×kw` kernel to `O×I×Kh×Kw`, centred.
pub fn pad_kernel<S: Scalar>(k: &Tensor<S>, kh_to: usize, kw_to: usize) -> Result<Tensor<S>> {
    let (o, i, kh, kw) = match k.shape() {
        &[o, i, kh, kw] => (o, i, kh, kw),
        s => return Err(shape_err!("kernel must be O×I×Kh×Kw, got {s:?}")),
    };
    if kh > kh_to || kw > kw_to {
        return Err(contract_err!("{kh}x{kw} kernel does not fit in {kh_to}x{kw_to}"));
    }
    if (kh_to - kh) % 2 != 0 || (kw_to - kw) % 2 != 0 {
        return Err(contract_err!(
            "cannot centre a {kh}x{kw} kernel in {kh_to}x{kw_to}"
        ));
    }
    let (oy, ox) = ((kh_to - kh) / 2, (kw_to - kw) / 2);
    let mut out = Tensor::zeros(&[o, i, kh_to, kw_to])?;
    let src = k.data();
    let dst = out.data_mut();
    for plane in 0..o * i {
        for y in 0..kh {
            for x in 0..kw {
                dst[(plane * kh_to + y + oy) * kw_to + x + ox] = src[(plane * kh + y) * kw + x];
            }
        }
    }
    Ok(out)
}

/// Returns a copy of `model` with a zero branch on every convolution and all
/// base convolutions frozen. Batch-norm state is left as it was.
pub fn expand<S: Scalar>(model: &Model<S>, shape: BranchShape) -> Result<Model<S>> {
    expand_with(model, shape, BranchInit::Zero)
}

pub fn expand_with<S: Scalar>(model: &Model<S>, shape: BranchShape, init: BranchInit) -> Result<Model<S>> {
    if model.is_expanded() {
        return Err(contract_err!("model already carries branches"));
    }
    let mut out = model.clone();
    for (idx, unit) in out.conv_units_mut().into_iter().enumerate() {
        let base = match unit {
            ConvUnit::Plain(base) => base.clone(),
            ConvUnit::Branched(_) => unreachable!("checked above"),
        };
        // distinct streams per layer when randomly initialised
        let init = match init {
            BranchInit::Normal { std, seed } => BranchInit::Normal { std, seed: seed.wrapping_add(idx as u64) },
            zero => zero,
        };
        *unit = ConvUnit::Branched(BranchConv::new(base, shape, init)?);
    }
    Ok(out)
}

/// Folds every branch back into its base convolution. The result has the
/// same layer names and kernel shapes as the model before expansion, with all
/// convolutions trainable.
pub fn compress<S: Scalar>(model: &Model<S>) -> Result<Model<S>> {
    let mut out = model.clone();
    for unit in out.conv_units_mut() {
        let fused = match unit {
            ConvUnit::Branched(bc) => bc.fuse()?,
            ConvUnit::Plain(c) => {
                c.set_trainable(true);
                continue;
            }
        };
        *unit = ConvUnit::Plain(fused);
    }
    Ok(out)
}
