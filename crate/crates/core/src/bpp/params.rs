//! Parameter layout and initialization.
//!
//! All learnable tensors live in one flat, named list. [`Layout`] records
//! which list entries each module uses, so the same indices address stored
//! tensors, tape variables and gradients alike.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{BppConfig, InitScheme};
use crate::error::{shape_err, Result};
use crate::resample::bicubic_down2_kernel9;
use crate::tensor::{Shape, Tensor};
use crate::Scalar;

/// Image channels entering and leaving the network.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSlot {
    pub weight: usize,
    pub bias: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormSlot {
    pub gamma: usize,
    pub beta: usize,
}

/// `x_out = c + reduce(relu(norm(expand(c))))`
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpdateSlots {
    pub expand: ConvSlot,
    pub norm: Option<NormSlot>,
    pub reduce: ConvSlot,
}

/// `e_out = out(zero_insert(relu(norm(fuse([p, c])))))`
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpscaleSlots {
    pub fuse: ConvSlot,
    pub norm: Option<NormSlot>,
    pub out: ConvSlot,
}

/// One flux unit. Absent modules are never evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FluxSlots {
    pub update: Option<UpdateSlots>,
    pub upscale: Option<UpscaleSlots>,
    pub downscale: Option<ConvSlot>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Bicubic9,
    /// Conv weight with the given fan-in channel count.
    Conv(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    init: Init,
}

/// Index map from network modules to entries of the flat parameter list.
/// Per-level vectors are indexed from 0 = level 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub scaler_a: Vec<usize>,
    pub scaler_b: Vec<usize>,
    pub analysis_a: Vec<ConvSlot>,
    pub analysis_b: Vec<ConvSlot>,
    /// `flux[t][k]`: block `t + 1`, level `k + 1`.
    pub flux: Vec<Vec<FluxSlots>>,
    pub synthesis: ConvSlot,
    pub specs: Vec<ParamSpec>,
}

struct Builder {
    specs: Vec<ParamSpec>,
    norm: bool,
}

impl Builder {
    fn push(&mut self, name: String, shape: Shape, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, c_out: usize, c_in: usize) -> ConvSlot {
        let weight = self.push(
            format!("{name}.weight"),
            Shape::new(c_out, c_in, 3, 3),
            Init::Conv(c_in),
        );
        let bias = self.push(format!("{name}.bias"), Shape::new(1, c_out, 1, 1), Init::Zeros);
        ConvSlot {
            weight,
            bias: Some(bias),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Option<NormSlot> {
        self.norm.then(|| NormSlot {
            gamma: self.push(format!("{name}.gamma"), Shape::new(1, c, 1, 1), Init::Ones),
            beta: self.push(format!("{name}.beta"), Shape::new(1, c, 1, 1), Init::Zeros),
        })
    }
}

impl Layout {
    pub fn new(config: &BppConfig) -> Result<Self> {
        config.validate()?;
        let l = config.levels;
        let ch = &config.channels;
        let e = config.expansion;
        let mut b = Builder {
            specs: Vec::new(),
            norm: config.use_instance_norm,
        };
        let scaler = |b: &mut Builder, tag: &str, k: usize| {
            b.push(
                format!("scaler_{tag}.{k}"),
                Shape::new(IMAGE_CHANNELS, 1, 9, 9),
                Init::Bicubic9,
            )
        };
        let scaler_a = (1..l).map(|k| scaler(&mut b, "a", k)).collect();
        let scaler_b = (1..l).map(|k| scaler(&mut b, "b", k)).collect();
        let analysis_a = (1..=l)
            .map(|k| b.conv(&format!("analysis_a.{k}"), ch[k - 1], IMAGE_CHANNELS))
            .collect();
        let analysis_b = (1..l)
            .map(|k| b.conv(&format!("analysis_b.{k}"), ch[k - 1], IMAGE_CHANNELS))
            .collect();
        let mut flux = Vec::with_capacity(config.depth);
        for t in 1..=config.depth {
            let mut row = Vec::with_capacity(l);
            for k in 1..=l {
                let c = ch[k - 1];
                let pre = format!("flux.{t}.{k}");
                let update = config.has_update(k).then(|| UpdateSlots {
                    expand: b.conv(&format!("{pre}.update.expand"), e * c, c),
                    norm: b.norm(&format!("{pre}.update.norm"), e * c),
                    reduce: b.conv(&format!("{pre}.update.reduce"), c, e * c),
                });
                let upscale = (k < l).then(|| UpscaleSlots {
                    fuse: b.conv(&format!("{pre}.upscale.fuse"), e * c, 2 * c),
                    norm: b.norm(&format!("{pre}.upscale.norm"), e * c),
                    out: b.conv(&format!("{pre}.upscale.out"), ch[k], e * c),
                });
                let downscale = (k > 1).then(|| b.conv(&format!("{pre}.downscale"), ch[k - 2], c));
                row.push(FluxSlots {
                    update,
                    upscale,
                    downscale,
                });
            }
            flux.push(row);
        }
        let synthesis = b.conv("synthesis", IMAGE_CHANNELS, ch[l - 1]);
        Ok(Layout {
            scaler_a,
            scaler_b,
            analysis_a,
            analysis_b,
            flux,
            synthesis,
            specs: b.specs,
        })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }
}

/// Learnable tensors of a network, in [`Layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct BppParams<T> {
    pub layout: Layout,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> BppParams<T> {
    /// Deterministic initialization from `seed`.
    pub fn build(config: &BppConfig, seed: u64) -> Result<Self> {
        let layout = Layout::new(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bicubic = bicubic_down2_kernel9::<f64>();
        let tensors = layout
            .specs
            .iter()
            .map(|spec| match spec.init {
                Init::Zeros => Tensor::zeros(spec.shape),
                Init::Ones => Tensor::full(spec.shape, T::one()),
                Init::Bicubic9 => Tensor::from_fn(spec.shape, |_, _, y, x| T::of(bicubic.at(0, 0, y, x))),
                Init::Conv(c_in) => conv_init(spec.shape, c_in, config, &mut rng),
            })
            .collect();
        Ok(BppParams { layout, tensors })
    }

    /// Reassembles parameters from named tensors, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_named(config: &BppConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let layout = Layout::new(config)?;
        if named.len() != layout.len() {
            return Err(shape_err!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                named.len()
            ));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for (spec, (name, t)) in layout.specs.iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(shape_err!(
                    "parameter {name} {:?} does not match layout entry {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                ));
            }
            tensors.push(t);
        }
        Ok(BppParams { layout, tensors })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layout.specs.iter().map(|s| s.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.layout.find(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.layout.find(name).map(move |i| &mut self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> BppParams<U> {
        BppParams {
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

fn conv_init<T: Scalar>(shape: Shape, c_in: usize, config: &BppConfig, rng: &mut ChaCha8Rng) -> Tensor<T> {
    match config.init_scheme {
        InitScheme::InDefault => {
            let std = (2.0 / (9.0 * c_in as f64)).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            Tensor::from_fn(shape, |_, _, _, _| T::of(normal.sample(rng)))
        }
        InitScheme::DiracNoise => {
            let normal = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
            Tensor::from_fn(shape, |co, ci, y, x| {
                let dirac = if co == ci && y == 1 && x == 1 { 1.0 } else { 0.0 };
                let noise = if config.noise_sigma > 0.0 {
                    normal.sample(rng)
                } else {
                    0.0
                };
                T::of(dirac + noise)
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_level_count_by_hand() {
        let mut c = BppConfig::new(1, &[4]);
        c.use_instance_norm = false;
        let p = BppParams::<f32>::build(&c, 0).unwrap();
        let analysis = 4 * 3 * 9 + 4;
        let update = (4 * 4 * 9 + 4) * 2;
        let synthesis = 3 * 4 * 9 + 3;
        assert_eq!(p.param_count(), analysis + update + synthesis);
    }

    #[test]
    fn depth_scales_flux_parameters() {
        let c1 = BppConfig::new(1, &[8, 4]);
        let c2 = BppConfig::new(2, &[8, 4]);
        let c4 = BppConfig::new(4, &[8, 4]);
        let n = |c: &BppConfig| BppParams::<f32>::build(c, 0).unwrap().param_count();
        let per_block = n(&c2) - n(&c1);
        assert_eq!(n(&c4) - n(&c2), 2 * per_block);
    }

    #[test]
    fn same_seed_same_params() {
        let c = BppConfig::new(2, &[8, 4]);
        let a = BppParams::<f32>::build(&c, 7).unwrap();
        let b = BppParams::<f32>::build(&c, 7).unwrap();
        assert_eq!(a, b);
        let d = BppParams::<f32>::build(&c, 8).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn names_are_unique_and_time_dependent() {
        let c = BppConfig::new(3, &[8, 6, 4]);
        let p = BppParams::<f32>::build(&c, 1).unwrap();
        let mut names: Vec<&str> = p.names().collect();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert_ne!(
            p.get("flux.1.2.update.expand.weight"),
            p.get("flux.2.2.update.expand.weight")
        );
        assert!(p.get("flux.1.3.upscale.fuse.weight").is_none());
        assert!(p.get("flux.1.1.downscale.weight").is_none());
        assert_eq!(
            p.get("flux.1.2.downscale.weight").unwrap().shape(),
            Shape::new(8, 6, 3, 3)
        );
    }

    #[test]
    fn optional_modules_follow_flags() {
        let mut c = BppConfig::new(1, &[4, 4]);
        c.freeze_lowest_update = true;
        let p = BppParams::<f32>::build(&c, 1).unwrap();
        assert!(p.get("flux.1.1.update.expand.weight").is_none());
        assert!(p.get("flux.1.2.update.expand.weight").is_some());
        c.identity_update_mode = true;
        c.use_instance_norm = false;
        let p = BppParams::<f32>::build(&c, 1).unwrap();
        assert!(p.names().all(|n| !n.contains("update") && !n.contains("norm")));
    }

    #[test]
    fn from_named_checks_layout() {
        let c = BppConfig::new(1, &[4, 4]);
        let p = BppParams::<f64>::build(&c, 3).unwrap();
        let named: Vec<_> = p.names().map(String::from).zip(p.tensors.iter().cloned()).collect();
        assert_eq!(BppParams::from_named(&c, named.clone()).unwrap(), p);
        let mut bad = named;
        bad.swap(0, 1);
        assert!(BppParams::from_named(&c, bad).is_err());
    }
}
