use serde::{Deserialize, Serialize};

use crate::diffnum::{ConvGeometry, ProjectionMode, GRL_LAMBDA};
use crate::{Error, Result};

/// Geometry and width of one convolutional layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub k_w: usize,
    pub k_h: usize,
    pub s_w: usize,
    pub s_h: usize,
    pub p_w: usize,
    pub p_h: usize,
    /// Output channels.
    pub c: usize,
}

impl LayerSpec {
    /// Stride-1 layer with `k x k` kernels and dimension-preserving padding.
    pub fn same(k: usize, c: usize) -> Self {
        Self {
            k_w: k,
            k_h: k,
            s_w: 1,
            s_h: 1,
            p_w: k.saturating_sub(1) / 2,
            p_h: k.saturating_sub(1) / 2,
            c,
        }
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            stride: (self.s_w, self.s_h),
            padding: (self.p_w, self.p_h),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-3,
            epochs: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HGNetConfig {
    pub layers: Vec<LayerSpec>,
    /// Number of source channel classes seen by the discriminators.
    pub classes: usize,
    /// Features discarded per masked layer; `None` means `ceil(c_l / 8)`.
    pub c_dis: Option<usize>,
    pub grl_lambda: f64,
    /// Weight of the summed discriminator losses in the training objective.
    pub adv_weight: f64,
    /// Spatial input size `(Q, I)` the strided-layer paddings are declared for.
    pub input_size: (usize, usize),
    #[serde(default)]
    pub projection: ProjectionMode,
    pub train: TrainConfig,
}

impl HGNetConfig {
    /// `L` stride-1 `3 x 3` layers: `L - 1` hidden layers of `width`
    /// channels and a final layer of `2M`.
    pub fn uniform(layers: usize, width: usize, antennas: usize, classes: usize, input_size: (usize, usize)) -> Self {
        let mut specs = vec![LayerSpec::same(3, width); layers.saturating_sub(1)];
        specs.push(LayerSpec::same(3, 2 * antennas));
        Self {
            layers: specs,
            classes,
            c_dis: None,
            grl_lambda: GRL_LAMBDA,
            adv_weight: 0.1,
            input_size,
            projection: ProjectionMode::Exact,
            train: TrainConfig::default(),
        }
    }

    /// Five layers of `2M` channels each, as in the original setup.
    pub fn paper(antennas: usize, classes: usize, input_size: (usize, usize)) -> Self {
        Self::uniform(5, 2 * antennas, antennas, classes, input_size)
    }

    /// Desk default: five layers, 32 hidden channels.
    pub fn desk(antennas: usize, classes: usize, input_size: (usize, usize)) -> Self {
        Self::uniform(5, 32, antennas, classes, input_size)
    }

    /// Variant without the high-generalization module.
    pub fn without_module(mut self) -> Self {
        self.c_dis = Some(0);
        self.adv_weight = 0.0;
        self
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Features discarded after layer `l` (0-based, `l < L - 1`).
    pub fn discard_count(&self, l: usize) -> usize {
        self.c_dis.unwrap_or_else(|| self.layers[l].c.div_ceil(8))
    }
}

/// One failed architecture condition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// 0-based layer index, or `None` for network-level rules.
    pub layer: Option<usize>,
    pub rule: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layer {}: {}", l + 1, self.rule),
            None => write!(f, "{}", self.rule),
        }
    }
}

/// Padding an axis needs to keep `input` unchanged, when one exists:
/// `(k - 1) / 2` at stride 1, `(w s - w - s + k) / 2` above.
pub fn preserving_padding(input: usize, kernel: usize, stride: usize) -> std::result::Result<usize, String> {
    if stride == 1 {
        if !(kernel - 1).is_multiple_of(2) {
            return Err(format!("(k - 1)/2 = ({kernel} - 1)/2 is not an integer"));
        }
        return Ok((kernel - 1) / 2);
    }
    let numer = (input * stride + kernel) as i64 - (input + stride) as i64;
    if numer < 0 {
        return Err(format!(
            "padding ({input}*{stride} - {input} - {stride} + {kernel})/2 is negative"
        ));
    }
    if numer % 2 != 0 {
        return Err(format!(
            "padding ({input}*{stride} - {input} - {stride} + {kernel})/2 is not an integer"
        ));
    }
    Ok(numer as usize / 2)
}

fn check_axis(
    out: &mut Vec<Violation>,
    layer: usize,
    axis: &str,
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) {
    match preserving_padding(input, kernel, stride) {
        Err(msg) => out.push(Violation {
            layer: Some(layer),
            rule: format!("{axis}: {msg}"),
        }),
        Ok(p) if p != padding => out.push(Violation {
            layer: Some(layer),
            rule: format!("{axis}: padding {padding} does not preserve size {input} (needs {p})"),
        }),
        Ok(_) => {}
    }
}

/// Every reason `cfg` cannot map a `Q x I` input to a `Q x I x 2M` output.
/// Empty means the architecture is valid.
pub fn validate_architecture(cfg: &HGNetConfig, antennas: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    let net = |rule: String| Violation { layer: None, rule };
    if cfg.layers.len() < 2 {
        out.push(net(format!("need at least 2 layers, got {}", cfg.layers.len())));
    }
    if cfg.classes == 0 {
        out.push(net("class count must be >= 1".into()));
    }
    let (w, h) = cfg.input_size;
    if w == 0 || h == 0 {
        out.push(net("declared input size must be positive".into()));
    }
    for (l, spec) in cfg.layers.iter().enumerate() {
        let fields = [
            ("k_w", spec.k_w),
            ("k_h", spec.k_h),
            ("s_w", spec.s_w),
            ("s_h", spec.s_h),
            ("c", spec.c),
        ];
        let zero: Vec<&str> = fields.iter().filter(|(_, v)| *v == 0).map(|(n, _)| *n).collect();
        if !zero.is_empty() {
            out.push(Violation {
                layer: Some(l),
                rule: format!("{} must be >= 1", zero.join(", ")),
            });
            continue;
        }
        check_axis(&mut out, l, "width", w, spec.k_w, spec.s_w, spec.p_w);
        check_axis(&mut out, l, "height", h, spec.k_h, spec.s_h, spec.p_h);
    }
    if let Some(last) = cfg.layers.last() {
        if last.c != 2 * antennas {
            out.push(Violation {
                layer: Some(cfg.layers.len() - 1),
                rule: format!(
                    "final layer has {} channels, output needs 2M = {}",
                    last.c,
                    2 * antennas
                ),
            });
        }
    }
    if cfg.layers.len() >= 2 {
        for l in 0..cfg.layers.len() - 1 {
            let c = cfg.layers[l].c;
            if c > 0 && cfg.discard_count(l) >= c {
                out.push(Violation {
                    layer: Some(l),
                    rule: format!("discarding {} of {c} features leaves none", cfg.discard_count(l)),
                });
            }
        }
    }
    if !(cfg.grl_lambda.is_finite() && cfg.adv_weight.is_finite() && cfg.adv_weight >= 0.0) {
        out.push(net("grl_lambda must be finite and adv_weight finite and >= 0".into()));
    }
    out
}

/// [`validate_architecture`] as a `Result`.
pub fn ensure_valid(cfg: &HGNetConfig, antennas: usize) -> Result<()> {
    let v = validate_architecture(cfg, antennas);
    if v.is_empty() {
        Ok(())
    } else {
        let msg: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        Err(Error::Architecture(msg.join("; ")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be >= 2 for batch normalization".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }
}
