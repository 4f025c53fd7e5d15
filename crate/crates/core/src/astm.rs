//! Spatio-temporal SSM unit: one scan along frames, one along the feature
//! axis of the transposed sequence, fused by two learnable scalars.

use crate::error::{Error, Result};
use crate::kernels::ScanMode;
use crate::nn::{DepthwiseConv1d, LayerNorm, Linear};
use crate::param::{Init, Module, ParamFactory, Parameter};
use crate::ssm::SsmCore;
use crate::tensor::Tensor;

/// `LayerNorm(SSM(Conv(Linear(h))))` over channels-last input.
#[derive(Debug)]
pub struct AstmBranch {
    pub linear_in: Linear,
    pub conv: DepthwiseConv1d,
    pub ssm: SsmCore,
    pub norm: LayerNorm,
}

impl AstmBranch {
    pub fn new(f: &ParamFactory, width: usize, d_state: usize, mode: ScanMode) -> Result<Self> {
        Ok(Self {
            linear_in: Linear::new(&f.pp("linear_in"), width, width)?,
            conv: DepthwiseConv1d::new(&f.pp("conv"), width, 3)?,
            ssm: SsmCore::new(&f.pp("ssm"), width, d_state, mode)?,
            norm: LayerNorm::new(&f.pp("norm"), width)?,
        })
    }

    /// Makes `Conv(Linear(h)) == h`: identity projection, centered delta
    /// kernel, zero biases.
    pub fn set_identity_front(&self) {
        let w = self.linear_in.in_dim();
        let mut eye = vec![0.0; w * w];
        (0..w).for_each(|i| eye[i * w + i] = 1.0);
        self.linear_in.weight.set_data(eye).expect("square projection");
        if let Some(b) = &self.linear_in.bias {
            b.fill(0.0);
        }
        self.conv.weight.set_data((0..w).flat_map(|_| [0.0, 1.0, 0.0]).collect()).expect("kernel 3");
        self.conv.bias.fill(0.0);
    }

    fn pre(&self, h: &Tensor) -> Result<Tensor> {
        self.conv.forward(&self.linear_in.forward(h)?)
    }

    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let u = self.pre(h)?;
        self.norm.forward(&self.ssm.forward(&u)?)
    }

    /// Same pipeline with the SSM parameters taken from `h_inter`.
    pub fn forward_cross(&self, h: &Tensor, h_inter: &Tensor) -> Result<Tensor> {
        let u = self.pre(h)?;
        self.norm.forward(&self.ssm.mssm(&u, h_inter)?)
    }
}

impl Module for AstmBranch {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.linear_in.visit_params(f);
        self.conv.visit_params(f);
        self.ssm.visit_params(f);
        self.norm.visit_params(f);
    }
}

fn check_seq(op: &'static str, h: &Tensor, width: usize, len: usize) -> Result<()> {
    if h.rank() != 3 || h.dim(2) != width || h.dim(1) != len {
        return Err(Error::shape(op, h.shape(), &[0, len, width]));
    }
    Ok(())
}

fn transposed(op: impl FnOnce(&Tensor) -> Result<Tensor>, h: &Tensor) -> Result<Tensor> {
    op(&h.transpose(1, 2)?)?.transpose(1, 2)
}

/// Self unit over `[Bt, L, D]`. The spatial branch runs on `[Bt, D, L]`,
/// so its weights are sized by the sequence length.
#[derive(Debug)]
pub struct AstmUnit {
    pub temporal: AstmBranch,
    pub spatial: AstmBranch,
    pub w_alpha: Parameter,
    pub w_beta: Parameter,
}

impl AstmUnit {
    pub fn new(f: &ParamFactory, d_model: usize, seq_len: usize, d_state: usize, mode: ScanMode) -> Result<Self> {
        Ok(Self {
            temporal: AstmBranch::new(&f.pp("temporal"), d_model, d_state, mode)?,
            spatial: AstmBranch::new(&f.pp("spatial"), seq_len, d_state, mode)?,
            w_alpha: f.param("w_alpha", &[1], Init::Constant(1.0))?,
            w_beta: f.param("w_beta", &[1], Init::Constant(1.0))?,
        })
    }

    fn check(&self, h: &Tensor) -> Result<()> {
        check_seq("astm", h, self.temporal.ssm.channels(), self.spatial.ssm.channels())
    }

    pub fn temporal_branch(&self, h: &Tensor) -> Result<Tensor> {
        self.check(h)?;
        self.temporal.forward(h)
    }

    pub fn spatial_branch(&self, h: &Tensor) -> Result<Tensor> {
        self.check(h)?;
        transposed(|x| self.spatial.forward(x), h)
    }

    /// `w_α·temporal(h) + w_β·spatial(h)`
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let ht = self.temporal_branch(h)?;
        let hs = self.spatial_branch(h)?;
        ht.mul(&self.w_alpha.tensor())?.add(&hs.mul(&self.w_beta.tensor())?)
    }
}

impl Module for AstmUnit {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.temporal.visit_params(f);
        self.spatial.visit_params(f);
        f(&self.w_alpha);
        f(&self.w_beta);
    }
}

/// Cross unit: both branches use Mix-SSM with selective parameters from
/// the interaction feature.
#[derive(Debug)]
pub struct AstmCrossUnit {
    pub temporal: AstmBranch,
    pub spatial: AstmBranch,
    /// Weight of the spatial output.
    pub alpha_c: Parameter,
    /// Weight of the temporal output.
    pub beta_c: Parameter,
}

impl AstmCrossUnit {
    pub fn new(f: &ParamFactory, d_model: usize, seq_len: usize, d_state: usize, mode: ScanMode) -> Result<Self> {
        Ok(Self {
            temporal: AstmBranch::new(&f.pp("temporal"), d_model, d_state, mode)?,
            spatial: AstmBranch::new(&f.pp("spatial"), seq_len, d_state, mode)?,
            alpha_c: f.param("alpha_c", &[1], Init::Constant(1.0))?,
            beta_c: f.param("beta_c", &[1], Init::Constant(1.0))?,
        })
    }

    pub fn forward(&self, h_p: &Tensor, h_inter: &Tensor) -> Result<Tensor> {
        if h_p.shape() != h_inter.shape() {
            return Err(Error::shape("astm_cross", h_p.shape(), h_inter.shape()));
        }
        check_seq("astm_cross", h_p, self.temporal.ssm.channels(), self.spatial.ssm.channels())?;
        let c_t = self.temporal.forward_cross(h_p, h_inter)?;
        let c_s = self
            .spatial
            .forward_cross(&h_p.transpose(1, 2)?, &h_inter.transpose(1, 2)?)?
            .transpose(1, 2)?;
        c_s.mul(&self.alpha_c.tensor())?.add(&c_t.mul(&self.beta_c.tensor())?)
    }

    /// Copies every weight from a self unit. The fusion scalars are matched
    /// by branch, so `alpha_c` takes `w_beta` and `beta_c` takes `w_alpha`.
    pub fn tie_to(&self, unit: &AstmUnit) {
        let copy = |dst: &AstmBranch, src: &AstmBranch| {
            for (d, s) in dst.parameters().into_iter().zip(src.parameters()) {
                d.set_data(s.to_vec()).expect("matching branch shapes");
            }
        };
        copy(&self.temporal, &unit.temporal);
        copy(&self.spatial, &unit.spatial);
        self.alpha_c.set_data(unit.w_beta.to_vec()).expect("scalar");
        self.beta_c.set_data(unit.w_alpha.to_vec()).expect("scalar");
    }
}

impl Module for AstmCrossUnit {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.temporal.visit_params(f);
        self.spatial.visit_params(f);
        f(&self.alpha_c);
        f(&self.beta_c);
    }
}

pub fn temporal_branch(h: &Tensor, unit: &AstmUnit) -> Result<Tensor> {
    unit.temporal_branch(h)
}

pub fn spatial_branch(h: &Tensor, unit: &AstmUnit) -> Result<Tensor> {
    unit.spatial_branch(h)
}

pub fn astm_fuse(h: &Tensor, unit: &AstmUnit) -> Result<Tensor> {
    unit.forward(h)
}

pub fn astm_cross(h_p: &Tensor, h_inter: &Tensor, unit: &AstmCrossUnit) -> Result<Tensor> {
    unit.forward(h_p, h_inter)
}
