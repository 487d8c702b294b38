//! Contracting/expanding U-Net assembled from the autodiff ops.
//!
//! Scale `s` of the contracting path has `base · 2^s` channels: two 3×3
//! convolutions with ReLU, then a 2×2 max-pool (except at the bottom). The
//! expanding path mirrors it with an up-convolution that halves channels,
//! a centre-crop concatenation with the matching skip, and two 3×3 convs.
//! A 1×1 head maps to the class logits.

use serde::{Deserialize, Serialize};

use crate::autodiff::{gaussian_init, Padding, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub n_classes: usize,
    /// Number of pooling stages; the network has `depth + 1` scales.
    pub depth: usize,
    pub base_channels: usize,
    #[serde(default)]
    pub padding: Padding,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            n_classes: 2,
            depth: 3,
            base_channels: 16,
            padding: Padding::Same,
        }
    }
}

impl UNetConfig {
    /// Four pools, 64 base channels.
    pub fn classic(in_channels: usize, n_classes: usize) -> Self {
        Self {
            in_channels,
            n_classes,
            depth: 4,
            base_channels: 64,
            padding: Padding::Valid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.base_channels < 1 || self.in_channels < 1 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!("need >= 2 classes, got {}", self.n_classes)));
        }
        Ok(())
    }

    pub fn channels_at(&self, scale: usize) -> usize {
        self.base_channels << scale
    }
}

/// Verifies that every feature map entering a max-pool has even sides and
/// that valid-mode crops are feasible. Errors name the 1-based scale.
pub fn check_tiling(cfg: &UNetConfig, height: usize, width: usize) -> Result<()> {
    output_dims(cfg, height, width).map(|_| ())
}

/// Spatial extent of the logits for a `height`×`width` input.
pub fn output_dims(cfg: &UNetConfig, height: usize, width: usize) -> Result<(usize, usize)> {
    let shrink = match cfg.padding {
        Padding::Same => 0,
        Padding::Valid => 4,
    };
    let mut skips = Vec::with_capacity(cfg.depth);
    let (mut h, mut w) = (height, width);
    for scale in 0..=cfg.depth {
        if h <= shrink || w <= shrink {
            return Err(Error::Tiling(format!(
                "scale {}: {h}x{w} too small for two 3x3 valid convolutions",
                scale + 1
            )));
        }
        h -= shrink;
        w -= shrink;
        if scale == cfg.depth {
            break;
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Tiling(format!(
                "scale {}: {h}x{w} entering 2x2 max-pool is not even",
                scale + 1
            )));
        }
        skips.push((h, w));
        h /= 2;
        w /= 2;
    }
    for (scale, &(sh, sw)) in skips.iter().enumerate().rev() {
        h *= 2;
        w *= 2;
        if sh < h || sw < w || (sh - h) % 2 != 0 || (sw - w) % 2 != 0 {
            return Err(Error::Tiling(format!(
                "scale {}: skip {sh}x{sw} cannot be centre-cropped to {h}x{w}",
                scale + 1
            )));
        }
        if h <= shrink || w <= shrink {
            return Err(Error::Tiling(format!(
                "scale {}: {h}x{w} too small on the expanding path",
                scale + 1
            )));
        }
        h -= shrink;
        w -= shrink;
    }
    Ok((h, w))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv3x3,
    MaxPool,
    UpConv,
    CropConcat,
    Head,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Index of the weight tensor; the bias follows it.
    param: Option<usize>,
    /// Contracting scale whose output is stored (conv) or consumed (crop).
    scale: usize,
    stores_skip: bool,
}

impl LayerSpec {
    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv3x3 | LayerKind::UpConv | LayerKind::Head)
    }
}

fn layer_plan(cfg: &UNetConfig) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut n_params = 0usize;
    let mut conv = |layers: &mut Vec<LayerSpec>, name: String, kind, cin, cout, scale| {
        layers.push(LayerSpec {
            name,
            kind,
            in_channels: cin,
            out_channels: cout,
            param: Some(n_params),
            scale,
            stores_skip: false,
        });
        n_params += 2;
    };
    let mut cin = cfg.in_channels;
    for s in 0..=cfg.depth {
        let c = cfg.channels_at(s);
        let prefix = if s == cfg.depth { "bottom".to_string() } else { format!("down{s}") };
        conv(&mut layers, format!("{prefix}.conv1"), LayerKind::Conv3x3, cin, c, s);
        conv(&mut layers, format!("{prefix}.conv2"), LayerKind::Conv3x3, c, c, s);
        if s < cfg.depth {
            layers.last_mut().expect("conv2 just pushed").stores_skip = true;
            layers.push(LayerSpec {
                name: format!("{prefix}.pool"),
                kind: LayerKind::MaxPool,
                in_channels: c,
                out_channels: c,
                param: None,
                scale: s,
                stores_skip: false,
            });
        }
        cin = c;
    }
    for s in (0..cfg.depth).rev() {
        let c = cfg.channels_at(s);
        conv(&mut layers, format!("up{s}.upconv"), LayerKind::UpConv, cin, c, s);
        layers.push(LayerSpec {
            name: format!("up{s}.concat"),
            kind: LayerKind::CropConcat,
            in_channels: c,
            out_channels: 2 * c,
            param: None,
            scale: s,
            stores_skip: false,
        });
        conv(&mut layers, format!("up{s}.conv1"), LayerKind::Conv3x3, 2 * c, c, s);
        conv(&mut layers, format!("up{s}.conv2"), LayerKind::Conv3x3, c, c, s);
        cin = c;
    }
    conv(&mut layers, "head".into(), LayerKind::Head, cin, cfg.n_classes, 0);
    layers
}

fn kernel_of(kind: LayerKind) -> usize {
    match kind {
        LayerKind::Conv3x3 => 3,
        LayerKind::UpConv => 2,
        _ => 1,
    }
}

#[derive(Clone, Debug)]
pub struct UNetModel<T: Scalar> {
    config: UNetConfig,
    layers: Vec<LayerSpec>,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

/// Result of a differentiable forward pass.
pub struct ForwardPass {
    pub logits: Var,
    /// One var per parameter tensor, in [`UNetModel::params`] order.
    pub params: Vec<Var>,
}

impl<T: Scalar> UNetModel<T> {
    /// Weights ~ N(0, 2/fan_in), biases zero.
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layers = layer_plan(&config);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (i, l) in layers.iter().filter(|l| l.is_conv()).enumerate() {
            let k = kernel_of(l.kind);
            let dims = [l.out_channels, l.in_channels, k, k];
            let layer_seed = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(i as u64 + 1);
            params.push(gaussian_init(&dims, layer_seed)?);
            names.push(format!("{}.weight", l.name));
            params.push(Tensor::zeros(vec![l.out_channels]));
            names.push(format!("{}.bias", l.name));
        }
        Ok(Self {
            config,
            layers,
            names,
            params,
        })
    }

    /// Rebuilds a model from named tensors, checking every shape.
    pub fn from_params(config: UNetConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut model = Self::build(config, 0)?;
        if named.len() != model.params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, got {}",
                model.params.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != model.names[i] || t.dims() != model.params[i].dims() {
                return Err(Error::Format(format!(
                    "tensor {i}: expected {} {:?}, got {name} {:?}",
                    model.names[i],
                    model.params[i].dims(),
                    t.dims()
                )));
            }
            model.params[i] = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn conv_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_conv()).count()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> UNetModel<U> {
        UNetModel {
            config: self.config.clone(),
            layers: self.layers.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records the network on `tape`. Parameters become grad-tracking leaves
    /// when `track_params` is set.
    pub fn forward_on(&self, tape: &mut Tape<T>, input: Tensor<T>, track_params: bool) -> Result<ForwardPass> {
        let (c, h, w) = input.chw()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        check_tiling(&self.config, h, w)?;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), track_params))
            .collect();
        let mut x = tape.leaf(input, false);
        let mut skips: Vec<Option<Var>> = vec![None; self.config.depth];
        let pad = self.config.padding;
        for layer in &self.layers {
            x = match layer.kind {
                LayerKind::Conv3x3 => {
                    let i = layer.param.expect("conv has params");
                    let y = tape.conv2d(x, params[i], params[i + 1], pad)?;
                    let y = tape.relu(y)?;
                    if layer.stores_skip {
                        skips[layer.scale] = Some(y);
                    }
                    y
                }
                LayerKind::MaxPool => tape.maxpool2(x)?,
                LayerKind::UpConv => {
                    let i = layer.param.expect("upconv has params");
                    tape.upconv2(x, params[i], params[i + 1])?
                }
                LayerKind::CropConcat => {
                    let skip = skips[layer.scale].expect("skip recorded on the way down");
                    tape.crop_concat(skip, x)?.0
                }
                LayerKind::Head => {
                    let i = layer.param.expect("head has params");
                    tape.conv2d(x, params[i], params[i + 1], Padding::Valid)?
                }
            };
        }
        Ok(ForwardPass { logits: x, params })
    }

    /// Logits `[K, H', W']` for one `[C, H, W]` input.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let pass = self.forward_on(&mut tape, input.clone(), false)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// `scale · Σ w·CE` and its parameter gradients for one sample. Labels and
    /// weights must match the logits' spatial extent.
    pub fn loss_and_grads(
        &self,
        input: Tensor<T>,
        labels: &[u32],
        weights: &[T],
        scale: T,
    ) -> Result<(T, Vec<Vec<T>>, Tensor<T>)> {
        let mut tape = Tape::new();
        let pass = self.forward_on(&mut tape, input, true)?;
        let loss = tape.softmax_weighted_ce(pass.logits, labels, weights)?;
        let loss = tape.scale(loss, scale)?;
        let mut grads = tape.backward(loss)?;
        let per_param = pass
            .params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![T::ZERO; p.len()]))
            .collect();
        Ok((tape.value(loss).item(), per_param, tape.value(pass.logits).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classic_config_has_23_convolutions() {
        let layers = layer_plan(&UNetConfig::classic(3, 2));
        let convs = layers.iter().filter(|l| l.is_conv()).count();
        assert_eq!(convs, 23);
        let kinds = |k| layers.iter().filter(|l| l.kind == k).count();
        assert_eq!(kinds(LayerKind::Conv3x3), 18);
        assert_eq!(kinds(LayerKind::UpConv), 4);
        assert_eq!(kinds(LayerKind::Head), 1);
    }

    #[test]
    fn channel_schedule_doubles_then_halves() {
        let cfg = UNetConfig::classic(3, 2);
        let layers = layer_plan(&cfg);
        let down: Vec<usize> = layers
            .iter()
            .filter(|l| l.name.ends_with("conv1") && !l.name.starts_with("up"))
            .map(|l| l.out_channels)
            .collect();
        assert_eq!(down, vec![64, 128, 256, 512, 1024]);
        let up: Vec<usize> = layers
            .iter()
            .filter(|l| l.kind == LayerKind::UpConv)
            .map(|l| l.out_channels)
            .collect();
        assert_eq!(up, vec![512, 256, 128, 64]);
        assert_eq!(layers.last().unwrap().in_channels, 64);
    }

    #[test]
    fn tiling_examples() {
        let same = |depth| UNetConfig {
            depth,
            ..UNetConfig::default()
        };
        assert!(check_tiling(&same(4), 144, 144).is_ok());
        assert!(check_tiling(&same(4), 96, 96).is_ok());
        let err = check_tiling(&same(5), 144, 144).unwrap_err();
        assert!(matches!(&err, Error::Tiling(m) if m.contains("scale 5") && m.contains("9x9")), "{err}");
        assert!(check_tiling(&same(3), 100, 100).is_err());
    }

    #[test]
    fn tiny_parameter_count_by_hand() {
        let cfg = UNetConfig {
            in_channels: 1,
            n_classes: 2,
            depth: 1,
            base_channels: 2,
            padding: Padding::Same,
        };
        let m = UNetModel::<f32>::build(cfg, 0).unwrap();
        // down0: 1->2, 2->2; bottom: 2->4, 4->4; up: 4->2 (2x2), 4->2, 2->2; head 2->2 (1x1)
        let expected = (9 * 2 + 2) + (9 * 4 + 2) + (9 * 8 + 4) + (9 * 16 + 4) + (4 * 8 + 2) + (9 * 8 + 2) + (9 * 4 + 2) + (4 + 2);
        assert_eq!(expected, 434);
        assert_eq!(m.param_count(), expected);
    }

    #[test]
    fn deterministic_build() {
        let a = UNetModel::<f32>::build(UNetConfig::default(), 3).unwrap();
        let b = UNetModel::<f32>::build(UNetConfig::default(), 3).unwrap();
        assert_eq!(a.params(), b.params());
        let c = UNetModel::<f32>::build(UNetConfig::default(), 4).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let cfg = UNetConfig {
            in_channels: 1,
            depth: 2,
            base_channels: 2,
            ..UNetConfig::default()
        };
        let mut m = UNetModel::<f64>::build(cfg, 1).unwrap();
        let n = m.params().len();
        for p in m.params_mut() {
            p.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        m.params_mut()[n - 1].values_mut().copy_from_slice(&[0.25, -1.5]);
        let x = Tensor::new(vec![1, 16, 16], (0..256).map(|i| i as f64 / 256.0).collect()).unwrap();
        let y = m.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 16, 16]);
        assert!(y.values()[..256].iter().all(|&v| v == 0.25));
        assert!(y.values()[256..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn valid_mode_shape_recurrence() {
        let cfg = UNetConfig {
            in_channels: 1,
            n_classes: 2,
            depth: 2,
            base_channels: 2,
            padding: Padding::Valid,
        };
        // 68 -> 64 | 32 -> 28 | 14 -> 10 ; 20 -> 16 ; 32 -> 28
        let closed = |mut h: i64| {
            for _ in 0..2 {
                h = (h - 4) / 2;
            }
            h -= 4;
            for _ in 0..2 {
                h = 2 * h - 4;
            }
            h
        };
        assert_eq!(closed(68), 28);
        assert_eq!(output_dims(&cfg, 68, 68).unwrap(), (28, 28));
        let m = UNetModel::<f32>::build(cfg, 2).unwrap();
        let y = m.forward(&Tensor::zeros(vec![1, 68, 68])).unwrap();
        assert_eq!(y.dims(), &[2, 28, 28]);
        assert!(check_tiling(m.config(), 66, 66).is_err());
    }

    #[test]
    fn wrong_channel_count() {
        let m = UNetModel::<f32>::build(UNetConfig::default(), 0).unwrap();
        assert!(matches!(m.forward(&Tensor::zeros(vec![1, 32, 32])), Err(Error::Shape(_))));
        assert!(matches!(m.forward(&Tensor::zeros(vec![3, 36, 36])), Err(Error::Tiling(_))));
    }
}
