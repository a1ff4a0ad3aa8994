//! Small trainable networks with tap points for alignment losses.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, Tape, Var};
use crate::error::{GcrError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "same_padding")]
        padding: Padding,
    },
    #[serde(rename = "maxpool")]
    MaxPool { size: usize },
    Relu,
    Flatten,
}

fn same_padding() -> Padding {
    Padding::Same
}

impl LayerSpec {
    fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv { .. })
    }

    fn output_shape(&self, input: &[usize], boundary: usize) -> Result<Vec<usize>> {
        let fail = |reason: String| GcrError::Specification { boundary, reason };
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(fail(format!(
                        "dense layer expects [{inputs}] but receives {input:?}"
                    )));
                }
                if outputs == 0 {
                    return Err(fail("dense layer with zero outputs".into()));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                let [c, h, w] = input else {
                    return Err(fail(format!("conv layer expects [c, h, w], got {input:?}")));
                };
                if *c != in_channels {
                    return Err(fail(format!(
                        "conv layer expects {in_channels} channels, got {c}"
                    )));
                }
                if kernel == 0 || out_channels == 0 {
                    return Err(fail("conv layer with zero extent".into()));
                }
                match padding {
                    Padding::Same => Ok(vec![out_channels, *h, *w]),
                    Padding::Valid if kernel <= *h && kernel <= *w => {
                        Ok(vec![out_channels, h - kernel + 1, w - kernel + 1])
                    }
                    Padding::Valid => Err(fail(format!(
                        "{kernel}x{kernel} kernel does not fit {h}x{w} input"
                    ))),
                }
            }
            LayerSpec::MaxPool { size } => {
                let [c, h, w] = input else {
                    return Err(fail(format!("maxpool expects [c, h, w], got {input:?}")));
                };
                if size == 0 || size > *h || size > *w {
                    return Err(fail(format!("pool size {size} does not fit {h}x{w}")));
                }
                Ok(vec![*c, h / size, w / size])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

/// Layer stack, input shape, and class count of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Per-sample input shape, e.g. `[2]` or `[1, 28, 28]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkSpec {
    /// Dense stack `widths[0] → … → widths[last]` with ReLU between layers.
    pub fn mlp(widths: &[usize], seed: u64) -> Self {
        let mut layers = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            if i > 0 {
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::Dense {
                inputs: w[0],
                outputs: w[1],
            });
        }
        Self {
            input: vec![widths[0]],
            layers,
            classes: *widths.last().unwrap(),
            seed,
        }
    }

    /// Two conv blocks followed by a dense head, for `1×h×w` images.
    pub fn small_convnet(h: usize, w: usize, classes: usize, seed: u64) -> Self {
        let layers = vec![
            LayerSpec::Conv {
                in_channels: 1,
                out_channels: 8,
                kernel: 3,
                padding: Padding::Same,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Conv {
                in_channels: 8,
                out_channels: 16,
                kernel: 3,
                padding: Padding::Same,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 16 * (h / 4) * (w / 4),
                outputs: 64,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 64,
                outputs: classes,
            },
        ];
        Self {
            input: vec![1, h, w],
            layers,
            classes,
            seed,
        }
    }

    /// Per-sample output shape of every layer.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(GcrError::Specification {
                boundary: 0,
                reason: "network has no layers".into(),
            });
        }
        let mut cur = self.input.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.output_shape(&cur, i)?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        let last = shapes.len() - 1;
        if shapes[last] != [self.classes] {
            return Err(GcrError::Specification {
                boundary: last,
                reason: format!(
                    "final layer outputs {:?}, expected [{}] logits",
                    shapes[last], self.classes
                ),
            });
        }
        if self.tap_eligible().is_empty() {
            return Err(GcrError::Specification {
                boundary: 0,
                reason: "no tap-eligible layer".into(),
            });
        }
        Ok(())
    }

    /// Dense and conv layers other than the final logits layer.
    pub fn tap_eligible(&self) -> Vec<usize> {
        let last = self.layers.len().saturating_sub(1);
        self.layers
            .iter()
            .enumerate()
            .filter(|(i, l)| *i != last && l.is_parametric())
            .map(|(i, _)| i)
            .collect()
    }

    /// Contiguous early/middle/late partition of the tap-eligible layers.
    /// Remainders go to the earlier bands.
    pub fn stage_bands(&self) -> [Vec<usize>; 3] {
        let eligible = self.tap_eligible();
        let (base, rem) = (eligible.len() / 3, eligible.len() % 3);
        let mut bands: [Vec<usize>; 3] = Default::default();
        let mut start = 0;
        for (b, band) in bands.iter_mut().enumerate() {
            let size = base + usize::from(b < rem);
            *band = eligible[start..start + size].to_vec();
            start += size;
        }
        bands
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Dense { inputs, outputs } => inputs * outputs + outputs,
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => out_channels * in_channels * kernel * kernel + out_channels,
                _ => 0,
            })
            .sum()
    }
}

/// Named subsets of the stage bands that carry alignment losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TapPlacement {
    #[serde(rename = "early")]
    Early,
    #[serde(rename = "mid")]
    Mid,
    #[serde(rename = "late")]
    Late,
    #[serde(rename = "early+mid")]
    EarlyMid,
    #[serde(rename = "mid+late")]
    MidLate,
    #[serde(rename = "early+late")]
    EarlyLate,
    #[serde(rename = "full")]
    Full,
}

impl TapPlacement {
    pub const ALL: [TapPlacement; 7] = [
        TapPlacement::Early,
        TapPlacement::Mid,
        TapPlacement::Late,
        TapPlacement::EarlyMid,
        TapPlacement::MidLate,
        TapPlacement::EarlyLate,
        TapPlacement::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TapPlacement::Early => "early",
            TapPlacement::Mid => "mid",
            TapPlacement::Late => "late",
            TapPlacement::EarlyMid => "early+mid",
            TapPlacement::MidLate => "mid+late",
            TapPlacement::EarlyLate => "early+late",
            TapPlacement::Full => "full",
        }
    }

    /// Short table label: E, M, L, E+M, M+L, E+L, Full.
    pub fn label(self) -> &'static str {
        match self {
            TapPlacement::Early => "E",
            TapPlacement::Mid => "M",
            TapPlacement::Late => "L",
            TapPlacement::EarlyMid => "E+M",
            TapPlacement::MidLate => "M+L",
            TapPlacement::EarlyLate => "E+L",
            TapPlacement::Full => "Full",
        }
    }

    fn stages(self) -> &'static [usize] {
        match self {
            TapPlacement::Early => &[0],
            TapPlacement::Mid => &[1],
            TapPlacement::Late => &[2],
            TapPlacement::EarlyMid => &[0, 1],
            TapPlacement::MidLate => &[1, 2],
            TapPlacement::EarlyLate => &[0, 2],
            TapPlacement::Full => &[0, 1, 2],
        }
    }
}

impl fmt::Display for TapPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TapPlacement {
    type Err = GcrError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|p| p.name() == lower || p.label().to_ascii_lowercase() == lower)
            .ok_or_else(|| GcrError::Config(format!("unknown tap placement `{s}`")))
    }
}

/// Concrete layer indices for a placement.
///
/// Each stage is represented by the deepest layer of its band. With fewer
/// than three eligible layers an empty band borrows the deepest layer of the
/// nearest earlier band.
pub fn resolve_taps(spec: &NetworkSpec, placement: TapPlacement) -> Result<Vec<usize>> {
    let eligible = spec.tap_eligible();
    if eligible.is_empty() {
        return Err(GcrError::Config("network has no tap-eligible layer".into()));
    }
    if placement == TapPlacement::Full {
        return Ok(eligible);
    }
    let bands = spec.stage_bands();
    let mut reps = [0usize; 3];
    for b in 0..3 {
        reps[b] = match bands[b].last() {
            Some(&l) => l,
            None if b > 0 => reps[b - 1],
            None => eligible[0],
        };
    }
    let mut taps: Vec<usize> = placement.stages().iter().map(|&s| reps[s]).collect();
    taps.dedup();
    Ok(taps)
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    /// One `n×d_l` tensor per requested tap, in the order requested.
    pub tapped: Vec<Var>,
}

/// A network instance: spec plus parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<Tensor>,
}

impl Network {
    /// Uniform `±sqrt(6/(fan_in+fan_out))` weights and zero biases, drawn in
    /// layer order from a generator seeded with `spec.seed`.
    pub fn build(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = Vec::new();
        for layer in &spec.layers {
            let (wshape, fan_in, fan_out, bias) = match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    (vec![inputs, outputs], inputs, outputs, outputs)
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (
                    vec![out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                    out_channels * kernel * kernel,
                    out_channels,
                ),
                _ => continue,
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let len = wshape.iter().product();
            let w = (0..len).map(|_| rng.random_range(-limit..limit)).collect();
            params.push(Tensor::new(wshape, w)?);
            params.push(Tensor::zeros(&[bias]));
        }
        Ok(Self { spec, params })
    }

    /// Rebuilds a network from saved parameters, checking every shape.
    pub fn from_parts(spec: NetworkSpec, params: Vec<Tensor>) -> Result<Self> {
        let fresh = Self::build(spec)?;
        if fresh.params.len() != params.len()
            || fresh
                .params
                .iter()
                .zip(&params)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(GcrError::Consistency(
                "parameter shapes do not match the network spec".into(),
            ));
        }
        Ok(Self {
            spec: fresh.spec,
            params,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Registers every parameter as a constant.
    pub fn bind_constant(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    /// Runs the layer stack on `batch` (`n×input`) and flattens the outputs
    /// of the requested tap layers to `n×d`.
    pub fn forward_with_taps(
        &self,
        tape: &mut Tape,
        params: &[Var],
        batch: Var,
        taps: &[usize],
    ) -> Result<ForwardOutput> {
        let eligible = self.spec.tap_eligible();
        if let Some(bad) = taps.iter().find(|t| !eligible.contains(t)) {
            return Err(GcrError::Contract(format!(
                "layer {bad} is not tap-eligible (eligible: {eligible:?})"
            )));
        }
        let shape = tape.value(batch).shape();
        if shape.len() != self.spec.input.len() + 1 || shape[1..] != self.spec.input[..] {
            return Err(GcrError::Dimension {
                op: "forward",
                left: shape.to_vec(),
                right: self.spec.input.clone(),
            });
        }
        let n = shape[0];
        let mut x = batch;
        let mut p = 0;
        let mut captured: Vec<(usize, Var)> = Vec::new();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            x = match *layer {
                LayerSpec::Dense { .. } => {
                    let h = tape.matmul(x, params[p])?;
                    p += 2;
                    tape.add_row_bias(h, params[p - 1])?
                }
                LayerSpec::Conv { padding, .. } => {
                    let h = tape.conv2d(x, params[p], padding)?;
                    p += 2;
                    tape.add_channel_bias(h, params[p - 1])?
                }
                LayerSpec::MaxPool { size } => tape.maxpool2d(x, size)?,
                LayerSpec::Relu => tape.relu(x)?,
                LayerSpec::Flatten => {
                    let d = tape.value(x).row_len();
                    tape.reshape(x, &[n, d])?
                }
            };
            if taps.contains(&i) {
                captured.push((i, x));
            }
        }
        let mut tapped = Vec::with_capacity(taps.len());
        for t in taps {
            let (_, v) = captured.iter().find(|(i, _)| i == t).expect("captured above");
            tapped.push(tape.flatten_rows(*v)?);
        }
        Ok(ForwardOutput { logits: x, tapped })
    }

    /// Forward pass without differentiation: logits and flattened taps.
    pub fn predict(&self, batch: &Tensor, taps: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let params = self.bind_constant(&mut tape);
        let x = tape.constant(batch.clone());
        let out = self.forward_with_taps(&mut tape, &params, x, taps)?;
        let tapped = out.tapped.iter().map(|&v| tape.value(v).clone()).collect();
        Ok((tape.value(out.logits).clone(), tapped))
    }
}
