use rand::Rng;

use super::{Layout, NnError, ParamId, ParamStore, Result, Tape, Tensor, Var};

pub const CONV_KERNEL: usize = 5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv5x1,
    BatchNorm,
    Relu,
    Lstm,
    BiLstm,
    Linear,
}

/// `in_dim`/`out_dim` are channels for convolutions, features for linear
/// layers and the cell size for recurrent layers (a BiLSTM emits
/// `2 * out_dim`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, in_dim: usize, out_dim: usize) -> Self {
        Self {
            kind,
            in_dim,
            out_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            LayerKind::BiLstm => 2 * self.out_dim,
            LayerKind::Relu | LayerKind::BatchNorm => self.in_dim,
            _ => self.out_dim,
        }
    }
}

/// Pending batch-norm running-average update collected during a training
/// forward pass.
#[derive(Debug, Clone)]
pub struct RunningUpdate {
    mean_id: ParamId,
    var_id: ParamId,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl RunningUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        for (id, batch) in [(self.mean_id, &self.mean), (self.var_id, &self.var)] {
            for (r, b) in store.value_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

/// One forward pass: the tape, read-only parameters, the mode and the
/// running-statistics updates it produced.
pub struct Pass<'s> {
    pub tape: Tape,
    pub store: &'s ParamStore,
    pub training: bool,
    pub updates: Vec<RunningUpdate>,
}

impl<'s> Pass<'s> {
    pub fn new(store: &'s ParamStore, training: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            training,
            updates: Vec::new(),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        self.tape.param(self.store, id)
    }
}

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, k: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-k..=k)).collect();
    Tensor::from_rows(rows, cols, data).expect("shape matches data")
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let k = 1.0 / (in_dim as f64).sqrt();
        Self {
            w: store.add(&format!("{name}.w"), uniform(rng, in_dim, out_dim, k)),
            b: store.add(&format!("{name}.b"), uniform(rng, 1, out_dim, k)),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        let (w, b) = (pass.param(self.w)?, pass.param(self.b)?);
        let y = pass.tape.matmul(x, w)?;
        pass.tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Conv1d {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let fan_in = CONV_KERNEL * in_dim;
        let k = 1.0 / (fan_in as f64).sqrt();
        Self {
            w: store.add(&format!("{name}.w"), uniform(rng, fan_in, out_dim, k)),
            b: store.add(&format!("{name}.b"), uniform(rng, 1, out_dim, k)),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, pass: &mut Pass, x: Var, layout: Layout) -> Result<Var> {
        let (w, b) = (pass.param(self.w)?, pass.param(self.b)?);
        pass.tape.conv1d(x, w, b, layout)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let ones = Tensor::from_rows(1, channels, vec![1.0; channels]).unwrap();
        Self {
            gamma: store.add(&format!("{name}.gamma"), ones.clone()),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(1, channels)),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(1, channels)),
            running_var: store.add_buffer(&format!("{name}.running_var"), ones),
            channels,
        }
    }

    pub fn forward(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        let (g, b) = (pass.param(self.gamma)?, pass.param(self.beta)?);
        // frozen layers keep their running statistics
        if pass.training && pass.store.is_optimized(self.gamma) {
            let (y, stats) = pass.tape.batch_norm(x, g, b, None)?;
            let (mean, var) = stats.expect("training mode returns batch statistics");
            pass.updates.push(RunningUpdate {
                mean_id: self.running_mean,
                var_id: self.running_var,
                mean,
                var,
            });
            Ok(y)
        } else {
            let store = pass.store;
            let running = (
                store.value(self.running_mean).data(),
                store.value(self.running_var).data(),
            );
            Ok(pass.tape.batch_norm(x, g, b, Some(running))?.0)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        let mut bias = uniform(rng, 1, 4 * hidden, k);
        // forget gate starts open
        bias.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        Self {
            w_ih: store.add(&format!("{name}.w_ih"), uniform(rng, in_dim, 4 * hidden, k)),
            w_hh: store.add(&format!("{name}.w_hh"), uniform(rng, hidden, 4 * hidden, k)),
            b: store.add(&format!("{name}.b"), bias),
            in_dim,
            hidden,
        }
    }

    pub fn forward(&self, pass: &mut Pass, x: Var, layout: Layout, reverse: bool) -> Result<Var> {
        let w_ih = pass.param(self.w_ih)?;
        let w_hh = pass.param(self.w_hh)?;
        let b = pass.param(self.b)?;
        pass.tape.lstm(x, w_ih, w_hh, b, layout, reverse)
    }
}

/// Forward and backward LSTMs; output columns `[0, H)` are the forward
/// direction, `[H, 2H)` the backward direction.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fwd: Lstm::new(store, &format!("{name}.fwd"), in_dim, hidden, rng),
            bwd: Lstm::new(store, &format!("{name}.bwd"), in_dim, hidden, rng),
        }
    }

    pub fn forward(&self, pass: &mut Pass, x: Var, layout: Layout) -> Result<Var> {
        let f = self.fwd.forward(pass, x, layout, false)?;
        let b = self.bwd.forward(pass, x, layout, true)?;
        pass.tape.concat(&[f, b])
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv1d),
    BatchNorm(BatchNorm),
    Relu,
    Lstm(Lstm),
    BiLstm(BiLstm),
    Linear(Linear),
}

impl Layer {
    pub fn build(spec: LayerSpec, store: &mut ParamStore, name: &str, rng: &mut impl Rng) -> Result<Self> {
        if spec.in_dim == 0 || (spec.out_dim == 0 && !matches!(spec.kind, LayerKind::Relu | LayerKind::BatchNorm)) {
            return Err(NnError::Spec(format!("{name}: dimensions must be positive")));
        }
        Ok(match spec.kind {
            LayerKind::Conv5x1 => Layer::Conv(Conv1d::new(store, name, spec.in_dim, spec.out_dim, rng)),
            LayerKind::BatchNorm => Layer::BatchNorm(BatchNorm::new(store, name, spec.in_dim)),
            LayerKind::Relu => Layer::Relu,
            LayerKind::Lstm => Layer::Lstm(Lstm::new(store, name, spec.in_dim, spec.out_dim, rng)),
            LayerKind::BiLstm => Layer::BiLstm(BiLstm::new(store, name, spec.in_dim, spec.out_dim, rng)),
            LayerKind::Linear => Layer::Linear(Linear::new(store, name, spec.in_dim, spec.out_dim, rng)),
        })
    }

    pub fn forward(&self, pass: &mut Pass, x: Var, layout: Layout) -> Result<Var> {
        match self {
            Layer::Conv(c) => c.forward(pass, x, layout),
            Layer::BatchNorm(b) => b.forward(pass, x),
            Layer::Relu => pass.tape.relu(x),
            Layer::Lstm(l) => l.forward(pass, x, layout, false),
            Layer::BiLstm(l) => l.forward(pass, x, layout),
            Layer::Linear(l) => l.forward(pass, x),
        }
    }
}
