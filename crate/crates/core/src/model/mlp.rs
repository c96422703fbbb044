use crate::error::Result;
use crate::params::{sub_seed, uniform, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Fully connected stack with ReLU between layers and a linear last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    widths: Vec<usize>,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new(prefix: &str, widths: &[usize], seed: u64, params: &mut ParamSet) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let weight = params.add(format!("{prefix}.w{i}"), uniform(&[w[0], w[1]], bound, sub_seed(seed, i as u64)));
                let bias = params.add(format!("{prefix}.b{i}"), Tensor::zeros(&[1, w[1]]));
                (weight, bias)
            })
            .collect();
        Self {
            layers,
            widths: widths.to_vec(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn last_layer(&self) -> (ParamId, ParamId) {
        *self.layers.last().unwrap()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, vars[w.0])?;
            h = tape.add(z, vars[b.0])?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}
