use crate::error::{dim_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Fully connected layer `x·W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Leaky-ReLU multilayer perceptron. Every layer but the last is followed
/// by the activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub slope: f64,
}

impl Mlp {
    /// He-initialized network over the layer widths `dims`
    /// (e.g. `[D, H, H, M]` for two hidden layers), zero biases.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], slope: f64, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {:?}", dims)));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .map_err(|e| Error::Config(e.to_string()))?;
                let weight = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
                Ok(Linear {
                    weight: Tensor::new(vec![fan_in, fan_out], weight)?,
                    bias: Tensor::zeros(&[fan_out]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers, slope)
    }

    pub fn from_layers(layers: Vec<Linear>, slope: f64) -> Result<Self> {
        if !(slope >= 0.0) {
            return Err(Error::Config(format!("activation slope {} < 0", slope)));
        }
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        let mut prev: Option<usize> = None;
        for (i, l) in layers.iter().enumerate() {
            let (fin, fout) = l.weight.dims2()?;
            if l.bias.shape() != [fout] {
                return dim_err(format!("layer {} bias shape {:?}", i, l.bias.shape()));
            }
            if let Some(p) = prev {
                if p != fin {
                    return dim_err(format!("layer {} expects {} inputs, previous gives {}", i, fin, p));
                }
            }
            prev = Some(fout);
        }
        Ok(Self { layers, slope })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.shape()[1]).unwrap_or(0)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
            .collect();
        BoundMlp {
            layers,
            slope: self.slope,
        }
    }
}

/// MLP weights registered on a tape as `(weight, bias)` leaves.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<(Var, Var)>,
    pub slope: f64,
}

/// Maps a `[N×D]` input to `[N×M]` features.
pub fn mlp_forward(tape: &mut Tape, x: Var, mlp: &BoundMlp) -> Result<Var> {
    let (n, d) = tape.value(x).dims2()?;
    let (w0, _) = mlp.layers[0];
    if tape.shape(w0)[0] != d {
        return dim_err(format!(
            "input has {} columns, first layer expects {}",
            d,
            tape.shape(w0)[0]
        ));
    }
    let last = mlp.layers.len() - 1;
    let mut h = x;
    for (i, &(w, b)) in mlp.layers.iter().enumerate() {
        let lin = tape.matmul(h, w)?;
        let bias = tape.repeat_rows(b, n)?;
        h = tape.add(lin, bias)?;
        if i < last {
            h = tape.leaky_relu(h, mlp.slope)?;
        }
    }
    Ok(h)
}
