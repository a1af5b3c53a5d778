use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::tape::{linear_forward, Tape, Tensor, Var};
use super::Activation;
use crate::error::{Error, Result};
use crate::rng;

/// Layer widths and activation of a fully connected network.
///
/// Parameters are laid out layer by layer; each layer stores its weight
/// matrix (out × in, row-major) followed by its bias vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpArch {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Invalid(format!(
                "layer sizes {layer_sizes:?} need at least two positive entries"
            )));
        }
        Ok(Self {
            layer_sizes,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let here = offset;
            offset += w[0] * w[1] + w[1];
            (here, w[0], w[1])
        })
    }

    /// Scaled uniform weights `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init_params(&self, rng: &mut rng::Rng) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.param_count());
        for (_, fan_in, fan_out) in self.layers() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.random_range(-bound..bound));
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        params
    }

    /// Records the forward pass on `tape`, reading parameters at `offset`.
    pub fn forward_tape(&self, tape: &mut Tape<'_>, offset: usize, x: Var) -> Result<Var> {
        let n = self.n_layers();
        let mut h = x;
        for (l, (off, fan_in, fan_out)) in self.layers().enumerate() {
            h = tape.linear(h, offset + off, fan_in, fan_out);
            if l + 1 < n {
                h = tape.activation(h, self.activation);
            }
            if !tape.value(h).is_finite() {
                return Err(Error::NonFiniteLayer { model: "mlp", layer: l });
            }
        }
        Ok(h)
    }

    /// Forward pass without recording, parameters read at `offset`.
    pub fn forward_plain(&self, params: &[f64], offset: usize, x: &Tensor) -> Result<Tensor> {
        if x.cols != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input width {} for a network expecting {}",
                x.cols,
                self.input_dim()
            )));
        }
        let n = self.n_layers();
        let mut h: Option<Tensor> = None;
        for (l, (off, fan_in, fan_out)) in self.layers().enumerate() {
            let mut y = linear_forward(params, offset + off, fan_in, fan_out, h.as_ref().unwrap_or(x));
            if l + 1 < n {
                for v in &mut y.data {
                    *v = self.activation.apply(*v);
                }
            }
            if !y.is_finite() {
                return Err(Error::NonFiniteLayer { model: "mlp", layer: l });
            }
            h = Some(y);
        }
        Ok(h.expect("at least one layer"))
    }
}

/// An MLP together with its flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub arch: MlpArch,
    pub params: Vec<f64>,
    /// Seed the parameters were initialized from.
    pub seed: u64,
}

impl Mlp {
    pub fn new(arch: MlpArch, seed: u64) -> Self {
        let mut rng = rng::stream(seed, "mlp.init");
        let params = arch.init_params(&mut rng);
        Self { arch, params, seed }
    }

    pub fn zeros(arch: MlpArch) -> Self {
        let params = vec![0.0; arch.param_count()];
        Self { arch, params, seed: 0 }
    }

    pub fn with_params(arch: MlpArch, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::Dimension(format!(
                "{} parameters for an architecture with {}",
                params.len(),
                arch.param_count()
            )));
        }
        Ok(Self { arch, params, seed: 0 })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(&Tensor::from_row(input))?.data)
    }

    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.arch.forward_plain(&self.params, 0, x)
    }

    /// Loss value and its gradient with respect to the parameters. `loss`
    /// receives the tape and the network output and returns a scalar node.
    pub fn grad<F>(&self, input: &Tensor, loss: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(&mut Tape<'_>, Var) -> Var,
    {
        if input.cols != self.arch.input_dim() {
            return Err(Error::Dimension(format!(
                "input width {} for a network expecting {}",
                input.cols,
                self.arch.input_dim()
            )));
        }
        let mut tape = Tape::new(&self.params);
        let x = tape.leaf(input.clone());
        let y = self.arch.forward_tape(&mut tape, 0, x)?;
        let out = loss(&mut tape, y);
        let value = tape.value(out).data[0];
        if !value.is_finite() {
            return Err(Error::Numeric {
                context: "mlp loss".into(),
                step: 0,
            });
        }
        Ok((value, tape.backward(out)))
    }

    pub fn checkpoint(&self) -> MlpCheckpoint {
        MlpCheckpoint {
            layer_sizes: self.arch.layer_sizes.clone(),
            activation: self.arch.activation,
            params: self.params.clone(),
            seed: self.seed,
            format_version: CHECKPOINT_FORMAT_VERSION,
        }
    }

    pub fn from_checkpoint(ck: &MlpCheckpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported checkpoint format version {}",
                ck.format_version
            )));
        }
        let arch = MlpArch::new(ck.layer_sizes.clone(), ck.activation)?;
        let mut m = Self::with_params(arch, ck.params.clone())?;
        m.seed = ck.seed;
        Ok(m)
    }
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// JSON checkpoint of an [`Mlp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
    pub seed: u64,
    pub format_version: u32,
}
