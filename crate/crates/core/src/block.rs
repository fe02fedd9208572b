//! The three-branch FreqSSM block and the degradation prior attention.
//!
//! ```text
//! F_LN  = LN(F_in)
//! F_s   = SpatialMamba(W_1 F_LN) * SiLU(F_LN)
//! F_b   = IWPT(FreqMamba(WPT(F_LN))) * SiLU(F_LN)
//! F_f   = FourierBranch(F_in)
//! F_out = W_fuse [F_in + F_s, F_b, F_f]
//! ```

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::fourier::FourierBranch;
use crate::ops;
use crate::params::{Bound, Conv, Norm, ParamStore, Pointwise};
use crate::scan::{self, MambaLayer, ScanKind, SsmLayer};
use crate::wavelet;

/// Which parts of the network are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub use_fourier: bool,
    pub use_band: bool,
    pub use_spatial_mamba: bool,
    pub use_attention_map: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_fourier: true,
            use_band: true,
            use_spatial_mamba: true,
            use_attention_map: true,
        }
    }
}

impl Ablation {
    pub fn any_branch(&self) -> bool {
        self.use_fourier || self.use_band || self.use_spatial_mamba
    }
}

/// Wavelet packet depth used by the band branch at a given resolution:
/// two levels where the size allows it, one otherwise.
pub fn band_levels(h: usize, w: usize) -> Result<usize> {
    if h % 4 == 0 && w % 4 == 0 {
        Ok(2)
    } else if h % 2 == 0 && w % 2 == 0 {
        Ok(1)
    } else {
        shape_err("band_branch", format!("H={h} and W={w} must be even"))
    }
}

/// Token mixer of the spatial branch. Without spatial Mamba the branch
/// keeps its shape but mixes with two 3x3 convolutions.
#[derive(Debug, Clone)]
pub enum SpatialMixer {
    Mamba(MambaLayer),
    Conv(Conv, Conv),
}

#[derive(Debug, Clone)]
pub struct SpatialBranch {
    pub entry: Pointwise,
    pub mixer: SpatialMixer,
}

impl SpatialBranch {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, state_dim: usize) -> Self {
        SpatialBranch {
            entry: Pointwise::new(store, &format!("{name}.entry"), channels, channels),
            mixer: SpatialMixer::Mamba(MambaLayer::new(
                store,
                &format!("{name}.mamba"),
                channels,
                state_dim,
                ScanKind::Spatial,
            )),
        }
    }

    pub fn new_conv(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        SpatialBranch {
            entry: Pointwise::new(store, &format!("{name}.entry"), channels, channels),
            mixer: SpatialMixer::Conv(
                Conv::new(store, &format!("{name}.conv0"), channels, channels, 3),
                Conv::new(store, &format!("{name}.conv1"), channels, channels, 3),
            ),
        }
    }

    pub fn mix(&self, tape: &mut Tape, p: &Bound, y: Var) -> Result<Var> {
        match &self.mixer {
            SpatialMixer::Mamba(layer) => scan::spatial_mamba(tape, p, layer, y),
            SpatialMixer::Conv(c0, c1) => {
                let h = c0.forward(tape, p, y)?;
                let h = ops::silu(tape, h);
                c1.forward(tape, p, h)
            }
        }
    }

    /// Returns `(F_s, mixer path)`; the second value is the ungated factor.
    pub fn forward_parts(&self, tape: &mut Tape, p: &Bound, f_ln: Var) -> Result<(Var, Var)> {
        let y = self.entry.forward(tape, p, f_ln)?;
        let m = self.mix(tape, p, y)?;
        let gate = ops::silu(tape, f_ln);
        Ok((ops::mul(tape, m, gate)?, m))
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, f_ln: Var) -> Result<Var> {
        Ok(self.forward_parts(tape, p, f_ln)?.0)
    }
}

/// Band branch with an arbitrary mixer applied to the wavelet mosaic.
pub fn band_branch_with<M>(tape: &mut Tape, f_ln: Var, mixer: M) -> Result<Var>
where
    M: FnOnce(&mut Tape, Var, usize) -> Result<Var>,
{
    let s = tape.value(f_ln).shape();
    let k = band_levels(s.h(), s.w())?;
    let mosaic = wavelet::wpt_mosaic_op(tape, f_ln, k)?;
    let mixed = mixer(tape, mosaic, k)?;
    let back = wavelet::iwpt_mosaic_op(tape, mixed, k)?;
    let gate = ops::silu(tape, f_ln);
    ops::mul(tape, back, gate)
}

#[derive(Debug, Clone)]
pub struct BandBranch {
    pub mamba: MambaLayer,
}

impl BandBranch {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, state_dim: usize) -> Self {
        let kind = ScanKind::FrequencyBands { levels: 2 };
        BandBranch {
            mamba: MambaLayer::new(store, &format!("{name}.mamba"), channels, state_dim, kind),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, f_ln: Var) -> Result<Var> {
        band_branch_with(tape, f_ln, |tape, mosaic, levels| {
            self.mamba
                .forward_as(tape, p, mosaic, ScanKind::FrequencyBands { levels })
        })
    }
}

/// Branch outputs of one block evaluation, for inspection and dumps.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutputs {
    pub spatial: Option<Var>,
    pub band: Option<Var>,
    pub fourier: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct FreqSsmBlock {
    pub norm: Norm,
    pub spatial: SpatialBranch,
    pub band: Option<BandBranch>,
    pub fourier: Option<FourierBranch>,
    pub fuse: Pointwise,
}

impl FreqSsmBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, state_dim: usize, ablation: Ablation) -> Self {
        let norm = Norm::new(store, &format!("{name}.norm"), channels);
        let spatial_name = format!("{name}.spatial");
        let spatial = if ablation.use_spatial_mamba {
            SpatialBranch::new(store, &spatial_name, channels, state_dim)
        } else {
            SpatialBranch::new_conv(store, &spatial_name, channels)
        };
        let band = ablation
            .use_band
            .then(|| BandBranch::new(store, &format!("{name}.band"), channels, state_dim));
        let fourier = ablation
            .use_fourier
            .then(|| FourierBranch::new(store, &format!("{name}.fourier"), channels));
        let slots = 1 + band.is_some() as usize + fourier.is_some() as usize;
        let fuse = Pointwise::new(store, &format!("{name}.fuse"), slots * channels, channels);
        FreqSsmBlock {
            norm,
            spatial,
            band,
            fourier,
            fuse,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, f_in: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, p, f_in)?.0)
    }

    pub fn forward_traced(&self, tape: &mut Tape, p: &Bound, f_in: Var) -> Result<(Var, BranchOutputs)> {
        let f_ln = self.norm.forward(tape, p, f_in)?;
        let mut out = BranchOutputs {
            spatial: None,
            band: None,
            fourier: None,
        };
        let fs = self.spatial.forward(tape, p, f_ln)?;
        out.spatial = Some(fs);
        let mut parts = vec![ops::add(tape, f_in, fs)?];
        if let Some(branch) = &self.band {
            let fb = branch.forward(tape, p, f_ln)?;
            out.band = Some(fb);
            parts.push(fb);
        }
        if let Some(branch) = &self.fourier {
            let ff = branch.forward(tape, p, f_in)?;
            out.fourier = Some(ff);
            parts.push(ff);
        }
        let cat = if parts.len() == 1 {
            parts[0]
        } else {
            ops::concat_channels(tape, &parts)?
        };
        Ok((self.fuse.forward(tape, p, cat)?, out))
    }
}

/// Produces the degradation prior map from a rainy image at one scale.
#[derive(Debug, Clone)]
pub struct AttentionMapGen {
    pub entry: Pointwise,
    pub ssm: Vec<SsmLayer>,
}

impl AttentionMapGen {
    pub fn new(store: &mut ParamStore, name: &str, image_channels: usize, channels: usize, state_dim: usize) -> Self {
        let entry = Pointwise::new(store, &format!("{name}.entry"), image_channels, channels);
        let ssm = (0..ScanKind::Spatial.traversal_count())
            .map(|i| SsmLayer::new(store, &format!("{name}.ssm{i}"), channels, state_dim))
            .collect();
        AttentionMapGen { entry, ssm }
    }

    /// `M = scan2d(W_1 I)` over the four raster traversals.
    pub fn map(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<Var> {
        let s = tape.value(image).shape();
        let y = self.entry.forward(tape, p, image)?;
        let tr = scan::traversals(ScanKind::Spatial, &self.ssm, p, s.h(), s.w())?;
        scan::scan2d(tape, y, &tr)
    }
}

/// `F * M + F`.
pub fn apply_attention(tape: &mut Tape, f: Var, m: Var) -> Result<Var> {
    let (fs, ms) = (tape.value(f).shape(), tape.value(m).shape());
    if fs != ms {
        return shape_err(
            "degradation_attention",
            format!("attention map {ms} does not match features {fs}"),
        );
    }
    let fm = ops::mul(tape, f, m)?;
    ops::add(tape, fm, f)
}

pub fn degradation_attention(tape: &mut Tape, p: &Bound, g: &AttentionMapGen, image: Var, f: Var) -> Result<Var> {
    let (is, fs) = (tape.value(image).shape(), tape.value(f).shape());
    if is.n() != fs.n() || is.h() != fs.h() || is.w() != fs.w() {
        return shape_err(
            "degradation_attention",
            format!("image {is} and features {fs} differ in batch or resolution"),
        );
    }
    let m = g.map(tape, p, image)?;
    apply_attention(tape, f, m)
}
