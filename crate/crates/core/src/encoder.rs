//! CNN feature extractor plus parameter-free 2-D sinusoidal positional
//! encoding, unfolded into the memory bank the decoder attends over.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::Conv2dSpec;
use crate::param::{Bound, ParamId, ParamStore};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;

/// Total downsampling of the CNN along each axis.
pub const STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// 3×3 convolution, padding 1, stride 1, followed by ReLU (after the
    /// batch norm when one directly follows).
    Conv { maps: usize },
    /// Max pooling with kernel = stride = `(height, width)`.
    MaxPool { size: (usize, usize) },
    BatchNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: Vec<LayerSpec>,
    /// Feature depth `D` of the memory bank.
    pub d_model: usize,
    pub pe_max_timescale: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl EncoderConfig {
    /// Six-convolution pipeline with the given map counts. Pools and batch
    /// norms sit in the fixed positions: conv, pool(2,2), conv, pool(2,2),
    /// conv, BN, conv, pool(1,2), conv, BN, pool(2,1), conv, BN.
    pub fn with_maps(maps: [usize; 6]) -> Self {
        use LayerSpec::*;
        EncoderConfig {
            layers: vec![
                Conv { maps: maps[0] },
                MaxPool { size: (2, 2) },
                Conv { maps: maps[1] },
                MaxPool { size: (2, 2) },
                Conv { maps: maps[2] },
                BatchNorm,
                Conv { maps: maps[3] },
                MaxPool { size: (1, 2) },
                Conv { maps: maps[4] },
                BatchNorm,
                MaxPool { size: (2, 1) },
                Conv { maps: maps[5] },
                BatchNorm,
            ],
            d_model: maps[5],
            pe_max_timescale: 10_000.0,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// Full-size network: 64, 128, 256, 256, 512, 512 maps, `D = 512`.
    pub fn paper() -> Self {
        Self::with_maps([64, 128, 256, 256, 512, 512])
    }

    /// Same topology with every map count scaled to `D / 512` of full size.
    pub fn scaled(d_model: usize) -> Self {
        let s = |m: usize| (m * d_model / 512).max(1);
        Self::with_maps([s(64), s(128), s(256), s(256), d_model, d_model])
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "feature depth D = {} must be a positive multiple of 4",
                self.d_model
            )));
        }
        let (mut sh, mut sw) = (1, 1);
        let mut last_maps = None;
        let mut prev_conv = false;
        for l in &self.layers {
            match *l {
                LayerSpec::Conv { maps } => {
                    if maps == 0 {
                        return Err(Error::Config("convolution with zero maps".into()));
                    }
                    last_maps = Some(maps);
                    prev_conv = true;
                }
                LayerSpec::MaxPool { size } => {
                    sh *= size.0;
                    sw *= size.1;
                    prev_conv = false;
                }
                LayerSpec::BatchNorm => {
                    if !prev_conv {
                        return Err(Error::Config("batch norm must directly follow a convolution".into()));
                    }
                    prev_conv = false;
                }
            }
        }
        if (sh, sw) != (STRIDE, STRIDE) {
            return Err(Error::Config(format!(
                "pooling reduces by ({sh},{sw}); the encoder needs exactly ({STRIDE},{STRIDE})"
            )));
        }
        if last_maps != Some(self.d_model) {
            return Err(Error::Config(format!(
                "last convolution has {last_maps:?} maps but D = {}",
                self.d_model
            )));
        }
        Ok(())
    }
}

/// The `L × D` sequence of encoder vectors with the grid cell each came from.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    /// `[L, D]`, row-major over the `(row, col)` grid.
    pub entries: Var,
    pub rows: usize,
    pub cols: usize,
    pub provenance: Vec<(usize, usize)>,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `PE` as a `[D, rows, cols]` tensor. Channels `[0, D/2)` encode the column
/// index `x`, channels `[D/2, D)` the row index `y`; even channels are sines
/// and odd channels cosines of `pos / T^(4i/D)`.
pub fn positional_encoding(rows: usize, cols: usize, d_model: usize, max_timescale: f64) -> Result<Tensor> {
    if d_model == 0 || !d_model.is_multiple_of(4) {
        return Err(Error::Invalid(format!("positional encoding needs D divisible by 4, got {d_model}")));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Invalid("positional encoding of an empty grid".into()));
    }
    let half = d_model / 2;
    let mut data = vec![0.0; d_model * rows * cols];
    for i in 0..d_model / 4 {
        let freq = max_timescale.powf(-(4.0 * i as f64) / d_model as f64);
        for y in 0..rows {
            for x in 0..cols {
                let at = |ch: usize| (ch * rows + y) * cols + x;
                let (ax, ay) = (x as f64 * freq, y as f64 * freq);
                data[at(2 * i)] = ax.sin();
                data[at(2 * i + 1)] = ax.cos();
                data[at(2 * i + half)] = ay.sin();
                data[at(2 * i + 1 + half)] = ay.cos();
            }
        }
    }
    Ok(Tensor::from_parts(vec![d_model, rows, cols], data))
}

#[derive(Clone, Debug)]
enum Layer {
    Conv { weight: ParamId, bias: ParamId },
    Pool { size: (usize, usize) },
    Norm { gamma: ParamId, beta: ParamId, running_mean: ParamId, running_var: ParamId },
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    layers: Vec<Layer>,
}

/// Finds `name` in `store` (checking its shape) or creates it with `init`.
pub(crate) fn ensure_param(
    store: &mut ParamStore,
    name: &str,
    shape: &[usize],
    trainable: bool,
    init: impl FnOnce(&mut ParamStore) -> Result<ParamId>,
) -> Result<ParamId> {
    match store.by_name(name) {
        Some(p) => {
            if p.value.shape() != shape {
                return Err(Error::shape("load", &[p.value.shape(), shape], format!("parameter `{name}`")));
            }
            if p.trainable != trainable {
                return Err(Error::Invalid(format!("parameter `{name}` has the wrong trainable flag")));
            }
            store.id(name)
        }
        None => init(store),
    }
}

impl Encoder {
    /// Registers (or looks up) every encoder parameter in `store`.
    pub fn build(config: EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut channels = 1;
        let (mut n_conv, mut n_bn) = (0, 0);
        for spec in &config.layers {
            match *spec {
                LayerSpec::Conv { maps } => {
                    let wname = format!("encoder.conv{n_conv}.weight");
                    let bname = format!("encoder.conv{n_conv}.bias");
                    let wshape = [maps, channels, 3, 3];
                    let weight = ensure_param(store, &wname, &wshape, true, |s| s.add_glorot(&wname, &wshape, rng))?;
                    let bias = ensure_param(store, &bname, &[maps], true, |s| s.add_zeros(&bname, &[maps]))?;
                    layers.push(Layer::Conv { weight, bias });
                    channels = maps;
                    n_conv += 1;
                }
                LayerSpec::MaxPool { size } => layers.push(Layer::Pool { size }),
                LayerSpec::BatchNorm => {
                    let p = format!("encoder.bn{n_bn}");
                    let c = [channels];
                    let gamma = ensure_param(store, &format!("{p}.gamma"), &c, true, |s| {
                        s.add(format!("{p}.gamma"), Tensor::full(c, 1.0), true)
                    })?;
                    let beta = ensure_param(store, &format!("{p}.beta"), &c, true, |s| s.add_zeros(format!("{p}.beta"), &c))?;
                    let running_mean = ensure_param(store, &format!("{p}.running_mean"), &c, false, |s| {
                        s.add(format!("{p}.running_mean"), Tensor::zeros(c), false)
                    })?;
                    let running_var = ensure_param(store, &format!("{p}.running_var"), &c, false, |s| {
                        s.add(format!("{p}.running_var"), Tensor::full(c, 1.0), false)
                    })?;
                    layers.push(Layer::Norm { gamma, beta, running_mean, running_var });
                    n_bn += 1;
                }
            }
        }
        Ok(Encoder { config, layers })
    }

    /// Checks an image batch `[N,1,H,W]` (or a single `[1,H,W]` image).
    pub fn check_input(shape: &[usize]) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = match *shape {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("cnn_forward", &[shape], "expected [N,1,H,W] or [1,H,W]")),
        };
        if c != 1 {
            return Err(Error::shape("cnn_forward", &[shape], "expected one grayscale channel"));
        }
        if h % STRIDE != 0 || w % STRIDE != 0 {
            return Err(Error::Invalid(format!(
                "image is {h}x{w}; height and width must be multiples of {STRIDE} (pad the image first)"
            )));
        }
        Ok((n, h, w))
    }

    /// Runs the CNN. Returns `[N, D, H/8, W/8]` and, in training mode, the
    /// batch statistics of every batch-norm layer in order.
    pub fn cnn_forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        store: &ParamStore,
        images: Var,
        train: bool,
    ) -> Result<(Var, Vec<BatchStats>)> {
        let (n, h, w) = Self::check_input(tape.shape(images))?;
        let mut x = tape.reshape(images, &[n, 1, h, w])?;
        let conv = Conv2dSpec {
            kernel: (3, 3),
            padding: (1, 1),
            stride: (1, 1),
        };
        let mut stats = Vec::new();
        let mut pending_relu = false;
        for layer in &self.layers {
            match layer {
                Layer::Conv { weight, bias } => {
                    if pending_relu {
                        x = tape.relu(x)?;
                    }
                    x = tape.conv2d(x, bound.var(*weight), Some(bound.var(*bias)), conv)?;
                    pending_relu = true;
                }
                Layer::Pool { size } => {
                    if pending_relu {
                        x = tape.relu(x)?;
                        pending_relu = false;
                    }
                    x = tape.maxpool2d(x, *size, *size)?;
                }
                Layer::Norm { gamma, beta, running_mean, running_var } => {
                    let running = (!train).then(|| {
                        (
                            store.get(*running_mean).value.data(),
                            store.get(*running_var).value.data(),
                        )
                    });
                    let (y, s) = tape.batchnorm2d(x, bound.var(*gamma), bound.var(*beta), running, self.config.bn_eps)?;
                    x = y;
                    stats.extend(s);
                }
            }
        }
        if pending_relu {
            x = tape.relu(x)?;
        }
        Ok((x, stats))
    }

    /// Folds batch statistics into the running averages (unbiased variance).
    pub fn update_running_stats(&self, store: &mut ParamStore, stats: &[BatchStats]) {
        let m = self.config.bn_momentum;
        let norms = self.layers.iter().filter_map(|l| match l {
            Layer::Norm { running_mean, running_var, .. } => Some((*running_mean, *running_var)),
            _ => None,
        });
        for ((mean_id, var_id), s) in norms.zip(stats) {
            let unbias = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
            for (r, b) in store.get_mut(mean_id).value.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in store.get_mut(var_id).value.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - m) * *r + m * b * unbias;
            }
        }
    }

    /// Adds the positional encoding to example `index` of a `[N,D,H',W']`
    /// feature batch and unfolds it row-major into a memory bank.
    pub fn memory_from_features(&self, tape: &mut Tape, features: Var, index: usize) -> Result<MemoryBank> {
        memory_from_features(tape, features, index, self.config.pe_max_timescale)
    }

    /// CNN, positional encoding and unfolding for a whole batch.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        store: &ParamStore,
        images: Var,
        train: bool,
    ) -> Result<(Vec<MemoryBank>, Vec<BatchStats>)> {
        let (features, stats) = self.cnn_forward(tape, bound, store, images, train)?;
        let n = tape.shape(features)[0];
        let banks = (0..n)
            .map(|i| self.memory_from_features(tape, features, i))
            .collect::<Result<Vec<_>>>()?;
        Ok((banks, stats))
    }
}

/// See [`Encoder::memory_from_features`].
pub fn memory_from_features(tape: &mut Tape, features: Var, index: usize, max_timescale: f64) -> Result<MemoryBank> {
    let shape = tape.shape(features).to_vec();
    let (d, rows, cols) = match shape[..] {
        [_, d, r, c] => (d, r, c),
        _ => return Err(Error::shape("encode", &[&shape], "features must be [N,D,H',W']")),
    };
    let pe = positional_encoding(rows, cols, d, max_timescale)?;
    let one = tape.select(features, index)?;
    let pe = tape.constant(pe);
    let summed = tape.add(one, pe)?;
    let flat = tape.reshape(summed, &[d, rows * cols])?;
    let entries = tape.transpose(flat)?;
    let provenance = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
    Ok(MemoryBank { entries, rows, cols, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn paper_config_is_valid_and_reduces_by_eight() {
        EncoderConfig::paper().validate().unwrap();
        EncoderConfig::scaled(64).validate().unwrap();
        let mut bad = EncoderConfig::paper();
        bad.layers.retain(|l| *l != LayerSpec::MaxPool { size: (1, 2) });
        assert!(bad.validate().is_err());
        let mut bad = EncoderConfig::scaled(64);
        bad.d_model = 62;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pe_at_column_zero_is_sin0_cos0() {
        let d = 16;
        let pe = positional_encoding(3, 4, d, 10_000.0).unwrap();
        let v = pe.data();
        for y in 0..3 {
            for i in 0..d / 4 {
                assert_eq!(v[((2 * i) * 3 + y) * 4], 0.0);
                assert_eq!(v[((2 * i + 1) * 3 + y) * 4], 1.0);
            }
        }
    }

    #[test]
    fn pe_d4_first_dim_at_x1_is_sin1() {
        let pe = positional_encoding(1, 2, 4, 10_000.0).unwrap();
        // channel 0, y = 0, x = 1
        assert!((pe.data()[1] - 0.841_470_984_807_896_5).abs() < 1e-15);
    }

    #[test]
    fn pe_rejects_depth_not_divisible_by_four() {
        assert!(positional_encoding(2, 2, 6, 10_000.0).is_err());
    }

    #[test]
    fn non_multiple_of_eight_input_asks_for_padding() {
        let err = Encoder::check_input(&[1, 1, 30, 64]).unwrap_err();
        assert!(err.to_string().contains("pad"));
    }

    #[test]
    fn zero_features_give_unfolded_pe() {
        let mut tape = Tape::new();
        let feats = tape.constant(Tensor::zeros([2, 8, 2, 3]));
        let bank = memory_from_features(&mut tape, feats, 1, 10_000.0).unwrap();
        let pe = positional_encoding(2, 3, 8, 10_000.0).unwrap();
        let e = tape.value(bank.entries);
        assert_eq!(e.shape(), &[6, 8]);
        for (i, &(r, c)) in bank.provenance.iter().enumerate() {
            assert_eq!(i, r * 3 + c);
            for ch in 0..8 {
                assert_eq!(e.data()[i * 8 + ch], pe.data()[(ch * 2 + r) * 3 + c]);
            }
        }
    }

    #[test]
    fn minimal_image_gives_single_entry() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(1, &[]);
        let enc = Encoder::build(EncoderConfig::scaled(16), &mut store, &mut r).unwrap();
        let mut tape = Tape::inference();
        let bound = store.bind(&mut tape);
        let img = tape.constant(Tensor::full([1, 8, 8], 1.0));
        let (banks, _) = enc.encode(&mut tape, &bound, &store, img, false).unwrap();
        assert_eq!(banks.len(), 1);
        assert_eq!(banks[0].len(), 1);
        assert_eq!(tape.shape(banks[0].entries), &[1, 16]);
        assert!(tape.value(banks[0].entries).all_finite());
    }
}
