use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dasl::{Branch, PatchTextAdapter};
use crate::error::{Error, Result};
use crate::residual::{ImageAdapter, ResidualHead};
use crate::tensor::Affine;

/// Tensor names in checkpoint order.
pub const TENSOR_NAMES: [&str; 8] = [
    "psi.weight",
    "psi.bias",
    "head.weight",
    "head.bias",
    "phi1.weight",
    "phi1.bias",
    "phi2.weight",
    "phi2.bias",
];

const PSI_NOISE_STD: f64 = 1e-3;
const PHI_INIT_STD: f64 = 0.02;

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub psi: ImageAdapter,
    pub head: ResidualHead,
    pub phi1: PatchTextAdapter,
    pub phi2: PatchTextAdapter,
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

impl AdapterParams {
    /// Seeded initialization: the image adapter starts near identity, the
    /// head at zero and each patch adapter from its own random stream.
    pub fn init(d_cls: usize, d_patch: usize, d_text: usize, seed: u64) -> Self {
        let stream = |id: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(id);
            rng
        };
        let mut psi = Affine::identity(d_cls);
        for (w, n) in psi
            .weight
            .iter_mut()
            .zip(gaussian(&mut stream(1), PSI_NOISE_STD, d_cls * d_cls))
        {
            *w += n;
        }
        let phi = |id| {
            let mut a = Affine::zeros(d_text, d_patch);
            a.weight = gaussian(&mut stream(id), PHI_INIT_STD, d_text * d_patch);
            a
        };
        Self {
            psi: ImageAdapter(psi),
            head: ResidualHead::zeros(d_cls),
            phi1: PatchTextAdapter {
                affine: phi(2),
                branch: Branch::Dasl,
            },
            phi2: PatchTextAdapter {
                affine: phi(3),
                branch: Branch::Oasl,
            },
        }
    }

    /// `(d_cls, d_patch, d_text)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.psi.dim(), self.phi1.d_patch(), self.phi1.d_text())
    }

    pub fn validate(&self) -> Result<()> {
        let (d_cls, d_patch, d_text) = self.dims();
        let psi = &self.psi.0;
        if psi.in_dim != psi.out_dim || psi.weight.len() != d_cls * d_cls || psi.bias.len() != d_cls {
            return Err(Error::Shape("image adapter is not a square affine map".into()));
        }
        if self.head.weight.len() != d_cls {
            return Err(Error::Shape("residual head does not match d_cls".into()));
        }
        for (phi, branch) in [(&self.phi1, Branch::Dasl), (&self.phi2, Branch::Oasl)] {
            let a = &phi.affine;
            if (a.out_dim, a.in_dim) != (d_text, d_patch)
                || a.weight.len() != d_text * d_patch
                || a.bias.len() != d_text
            {
                return Err(Error::Shape("patch adapters disagree in shape".into()));
            }
            if phi.branch != branch {
                return Err(Error::Config(format!(
                    "adapter tagged {:?} in the {branch:?} slot",
                    phi.branch
                )));
            }
        }
        if !self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite())) {
            return Err(Error::Argument("parameters contain non-finite values".into()));
        }
        Ok(())
    }

    /// Every tensor in checkpoint order.
    pub fn tensors(&self) -> [(&'static str, &[f64]); 8] {
        [
            (TENSOR_NAMES[0], &self.psi.0.weight),
            (TENSOR_NAMES[1], &self.psi.0.bias),
            (TENSOR_NAMES[2], &self.head.weight),
            (TENSOR_NAMES[3], std::slice::from_ref(&self.head.bias)),
            (TENSOR_NAMES[4], &self.phi1.affine.weight),
            (TENSOR_NAMES[5], &self.phi1.affine.bias),
            (TENSOR_NAMES[6], &self.phi2.affine.weight),
            (TENSOR_NAMES[7], &self.phi2.affine.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        [
            &mut self.psi.0.weight,
            &mut self.psi.0.bias,
            &mut self.head.weight,
            std::slice::from_mut(&mut self.head.bias),
            &mut self.phi1.affine.weight,
            &mut self.phi1.affine.bias,
            &mut self.phi2.affine.weight,
            &mut self.phi2.affine.bias,
        ]
    }
}

/// Gradients laid out like [`AdapterParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub psi: Affine,
    pub head: ResidualHead,
    pub phi1: Affine,
    pub phi2: Affine,
}

impl AdapterGrads {
    pub fn zeros_like(params: &AdapterParams) -> Self {
        let (d_cls, d_patch, d_text) = params.dims();
        Self {
            psi: Affine::zeros(d_cls, d_cls),
            head: ResidualHead::zeros(d_cls),
            phi1: Affine::zeros(d_text, d_patch),
            phi2: Affine::zeros(d_text, d_patch),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 8] {
        [
            (TENSOR_NAMES[0], &self.psi.weight),
            (TENSOR_NAMES[1], &self.psi.bias),
            (TENSOR_NAMES[2], &self.head.weight),
            (TENSOR_NAMES[3], std::slice::from_ref(&self.head.bias)),
            (TENSOR_NAMES[4], &self.phi1.weight),
            (TENSOR_NAMES[5], &self.phi1.bias),
            (TENSOR_NAMES[6], &self.phi2.weight),
            (TENSOR_NAMES[7], &self.phi2.bias),
        ]
    }

    pub(crate) fn add_scaled(&mut self, other: &AdapterGrads, scale: f64) {
        self.psi.add_scaled(&other.psi, scale);
        for (a, b) in self.head.weight.iter_mut().zip(&other.head.weight) {
            *a += scale * b;
        }
        self.head.bias += scale * other.head.bias;
        self.phi1.add_scaled(&other.phi1, scale);
        self.phi2.add_scaled(&other.phi2, scale);
    }
}
