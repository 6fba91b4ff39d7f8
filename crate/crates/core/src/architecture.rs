//! Model wiring: the two-layer depth-adaptive hierarchy and the stacked and
//! deep-transition baselines.
//!
//! Per time step the depth-adaptive model evaluates, in order:
//!
//! 1. `x = input_proj(x_raw)`
//! 2. `B_1` on the previous step's `B_m` state with input `x`
//! 3. the top cell `T` on its own previous state with input `h(B_1)`
//! 4. `B_2 .. B_{m-1}` on their predecessor's state with zero input
//! 5. `B_m` on `B_{m-1}`'s state with input `h(T)`
//! 6. `logits = output_proj(h(B_m))`
//!
//! `B_m`'s state is what `B_1` consumes at the next step.

use crate::cells::{gated_cell, lstm_cell, CellParams, CellState, CellVars, MaskConstants, MaskSource, StateVars};
use crate::error::{Error, Result};
use crate::metrics::CostModel;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{init_params, InitScheme, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    DaLstm,
    StackedLstm,
    DeepTransitionLstm,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::DaLstm => "da_lstm",
            Arch::StackedLstm => "stacked_lstm",
            Arch::DeepTransitionLstm => "deep_transition_lstm",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arch::DaLstm => "DA-LSTM",
            Arch::StackedLstm => "Stacked LSTM",
            Arch::DeepTransitionLstm => "Deep Transition LSTM",
        }
    }

    pub fn gated(self) -> bool {
        matches!(self, Arch::DaLstm)
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "da_lstm" => Ok(Arch::DaLstm),
            "stacked_lstm" => Ok(Arch::StackedLstm),
            "deep_transition_lstm" => Ok(Arch::DeepTransitionLstm),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Hidden size `D`.
    pub hidden: usize,
    /// Bottom-chain length for the depth-adaptive and deep-transition models,
    /// layer count for the stacked model.
    pub cells: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub mask: MaskConstants,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(arch: Arch, hidden: usize, cells: usize, input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            arch,
            hidden,
            cells,
            input_dim,
            num_classes,
            mask: MaskConstants::default(),
            seed: default_seed(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden size must be at least 1".into()));
        }
        if self.cells == 0 {
            return Err(Error::Config("cell count must be at least 1".into()));
        }
        if self.arch == Arch::DaLstm && self.cells < 2 {
            return Err(Error::Config(
                "da_lstm needs at least 2 bottom cells (B_1 and B_m are distinct)".into(),
            ));
        }
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("input_dim and num_classes must be positive".into()));
        }
        self.mask.validate()
    }

    /// Number of cells evaluated per time step.
    pub fn cells_per_step(&self) -> usize {
        match self.arch {
            Arch::DaLstm => self.cells + 1,
            _ => self.cells,
        }
    }

    /// `input_dim·D + D + cells·(8D² + 4D [+ 2D + 1]) + D·K + K`.
    pub fn parameter_count(&self) -> usize {
        let d = self.hidden;
        let per_cell = 8 * d * d + 4 * d + if self.arch.gated() { 2 * d + 1 } else { 0 };
        self.input_dim * d + d + self.cells_per_step() * per_cell + d * self.num_classes + self.num_classes
    }

    /// Multiplications per step when every gated cell updates fully.
    pub fn full_step_cost(&self) -> u64 {
        CostModel::new(self.hidden, self.arch.gated()).full_cost() * self.cells_per_step() as u64
    }
}

/// Affine map `w·x + b` with `w` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn init(out: usize, inp: usize, seed: u64) -> Self {
        Linear {
            w: init_params(out, inp, seed, InitScheme::Uniform),
            b: Tensor::zeros(out, 1),
        }
    }

    fn zeros(out: usize, inp: usize) -> Self {
        Linear {
            w: Tensor::zeros(out, inp),
            b: Tensor::zeros(out, 1),
        }
    }
}

/// SplitMix64 finalizer, used to give every tensor its own stream.
pub(crate) fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// All trainable tensors of a model. All cells are untied.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub input_proj: Linear<T>,
    /// `B_1..B_m`, the stacked layers bottom-up, or the transition chain.
    pub bottom: Vec<CellParams<T>>,
    /// Top cell `T`, depth-adaptive model only.
    pub top: Option<CellParams<T>>,
    pub output_proj: Linear<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, gated, seed) = (config.hidden, config.arch.gated(), config.seed);
        Ok(ModelParams {
            input_proj: Linear::init(d, config.input_dim, derive_seed(seed, 0)),
            bottom: (0..config.cells)
                .map(|k| CellParams::init(d, gated, derive_seed(seed, 10 + k as u64)))
                .collect(),
            top: (config.arch == Arch::DaLstm).then(|| CellParams::init(d, true, derive_seed(seed, 1))),
            output_proj: Linear::init(config.num_classes, d, derive_seed(seed, 2)),
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, gated) = (config.hidden, config.arch.gated());
        Ok(ModelParams {
            input_proj: Linear::zeros(d, config.input_dim),
            bottom: (0..config.cells).map(|_| CellParams::zeros(d, gated)).collect(),
            top: (config.arch == Arch::DaLstm).then(|| CellParams::zeros(d, true)),
            output_proj: Linear::zeros(config.num_classes, d),
        })
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("input_proj.w".to_string(), &self.input_proj.w),
            ("input_proj.b".to_string(), &self.input_proj.b),
        ];
        for (k, cell) in self.bottom.iter().enumerate() {
            for (name, t) in cell.named_tensors() {
                out.push((format!("bottom.{k}.{name}"), t));
            }
        }
        if let Some(top) = &self.top {
            for (name, t) in top.named_tensors() {
                out.push((format!("top.{name}"), t));
            }
        }
        out.push(("output_proj.w".to_string(), &self.output_proj.w));
        out.push(("output_proj.b".to_string(), &self.output_proj.b));
        out
    }

    /// Same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.input_proj.w, &mut self.input_proj.b];
        for cell in &mut self.bottom {
            out.extend(cell.tensors_mut());
        }
        if let Some(top) = &mut self.top {
            out.extend(top.tensors_mut());
        }
        out.push(&mut self.output_proj.w);
        out.push(&mut self.output_proj.b);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Zero tensors with identical shapes.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    /// Checks every shape against `config`.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let want = ModelParams::<T>::zeros(config)?;
        let (a, b) = (self.named_tensors(), want.named_tensors());
        if a.len() != b.len() {
            return Err(Error::Config(format!(
                "expected {} tensors for this configuration, found {}",
                b.len(),
                a.len()
            )));
        }
        for ((name, t), (_, w)) in a.iter().zip(&b) {
            if t.shape() != w.shape() {
                return Err(Error::Dimension {
                    op: "model parameter",
                    left: w.shape(),
                    right: t.shape(),
                });
            }
            let _ = name;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U> {
            input_proj: Linear {
                w: self.input_proj.w.cast(),
                b: self.input_proj.b.cast(),
            },
            bottom: Vec::new(),
            top: None,
            output_proj: Linear {
                w: self.output_proj.w.cast(),
                b: self.output_proj.b.cast(),
            },
        };
        let cast_cell = |c: &CellParams<T>| {
            let mut z = CellParams::<U>::zeros(c.hidden(), c.has_portion_gate());
            for (dst, (_, src)) in z.tensors_mut().into_iter().zip(c.named_tensors()) {
                *dst = src.cast();
            }
            z
        };
        out.bottom = self.bottom.iter().map(cast_cell).collect();
        out.top = self.top.as_ref().map(cast_cell);
        out
    }
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = ModelParams::init(&config)?;
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(Model { config, params })
    }

    pub fn zero_state(&self) -> RecurrentState<T> {
        let d = self.config.hidden;
        match self.config.arch {
            Arch::DaLstm => RecurrentState {
                bottom: vec![CellState::zeros(d)],
                top: Some(CellState::zeros(d)),
            },
            Arch::StackedLstm => RecurrentState {
                bottom: vec![CellState::zeros(d); self.config.cells],
                top: None,
            },
            Arch::DeepTransitionLstm => RecurrentState {
                bottom: vec![CellState::zeros(d)],
                top: None,
            },
        }
    }

    /// One time step of whichever architecture the model is configured for.
    pub fn step(&self, state: &RecurrentState<T>, x_raw: &Tensor<T>) -> Result<StepOutput<T>> {
        self.step_with(state, x_raw, UpdateMode::Adaptive)
    }

    pub fn step_with(&self, state: &RecurrentState<T>, x_raw: &Tensor<T>, mode: UpdateMode) -> Result<StepOutput<T>> {
        if !x_raw.is_vector() || x_raw.len() != self.config.input_dim {
            return Err(Error::Dimension {
                op: "step input",
                left: (self.config.input_dim, 1),
                right: x_raw.shape(),
            });
        }
        self.check_state(state)?;
        let mut tape = Tape::new();
        let vars = ModelVars::register(&mut tape, &self.params);
        let consts = StepConstants::new(&mut tape, self.config.hidden, mode);
        let prev = StateHandles::register(&mut tape, state);
        let x = tape.input(x_raw);
        let out = step_on_tape(&mut tape, &self.config, &vars, &consts, &prev, x)?;
        Ok(StepOutput {
            state: out.state.read(&tape),
            logits: tape.value(out.logits).clone(),
            trace: out.trace(&tape, self.config.hidden),
        })
    }

    fn check_state(&self, state: &RecurrentState<T>) -> Result<()> {
        let want = self.zero_state();
        let ok = state.bottom.len() == want.bottom.len()
            && state.top.is_some() == want.top.is_some()
            && state
                .bottom
                .iter()
                .chain(state.top.iter())
                .all(|s| s.c.len() == self.config.hidden && s.h.len() == self.config.hidden);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension {
                op: "recurrent state",
                left: (self.config.hidden, want.bottom.len()),
                right: (
                    state.bottom.first().map_or(0, |s| s.h.len()),
                    state.bottom.len(),
                ),
            })
        }
    }
}

/// State threaded between time steps.
///
/// Depth-adaptive: `bottom = [state of B_m]`, `top = Some(state of T)`.
/// Stacked: one state per layer. Deep transition: `bottom = [state of the last cell]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T> {
    pub bottom: Vec<CellState<T>>,
    pub top: Option<CellState<T>>,
}

/// Per-step record of portion values, masks and cost, one entry per
/// evaluated cell in evaluation order. Ungated cells have `None` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace<T> {
    pub portions: Vec<Option<T>>,
    pub masks: Vec<Option<Tensor<T>>>,
    pub mults: Vec<u64>,
}

impl<T: Scalar> StepTrace<T> {
    pub fn len(&self) -> usize {
        self.portions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.portions.is_empty()
    }

    pub fn total_mults(&self) -> u64 {
        self.mults.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput<T> {
    pub state: RecurrentState<T>,
    pub logits: Tensor<T>,
    pub trace: StepTrace<T>,
}

/// Whether gated cells use their soft mask or update every dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateMode {
    Adaptive,
    /// Mask forced to all ones; portion values are still traced.
    FullUpdate,
}

pub(crate) struct ModelVars {
    in_w: Var,
    in_b: Var,
    bottom: Vec<CellVars>,
    top: Option<CellVars>,
    out_w: Var,
    out_b: Var,
}

impl ModelVars {
    pub(crate) fn register<'p, T: Scalar>(tape: &mut Tape<'p, T>, params: &'p ModelParams<T>) -> Self {
        ModelVars {
            in_w: tape.param(&params.input_proj.w),
            in_b: tape.param(&params.input_proj.b),
            bottom: params.bottom.iter().map(|c| CellVars::register(tape, c)).collect(),
            top: params.top.as_ref().map(|c| CellVars::register(tape, c)),
            out_w: tape.param(&params.output_proj.w),
            out_b: tape.param(&params.output_proj.b),
        }
    }

    /// Parameter handles in [`ModelParams::named_tensors`] order.
    pub(crate) fn all(&self) -> Vec<Var> {
        let mut out = vec![self.in_w, self.in_b];
        for c in &self.bottom {
            out.extend(c.vars());
        }
        if let Some(t) = &self.top {
            out.extend(t.vars());
        }
        out.push(self.out_w);
        out.push(self.out_b);
        out
    }
}

pub(crate) struct StepConstants {
    zero: Var,
    ones: Option<Var>,
}

impl StepConstants {
    pub(crate) fn new<T: Scalar>(tape: &mut Tape<'_, T>, d: usize, mode: UpdateMode) -> Self {
        StepConstants {
            zero: tape.constant(Tensor::zeros(d, 1)),
            ones: (mode == UpdateMode::FullUpdate).then(|| tape.constant(Tensor::filled(d, 1, T::one()))),
        }
    }

    fn source(&self) -> MaskSource {
        match self.ones {
            Some(e) => MaskSource::Fixed(e),
            None => MaskSource::Portion,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct StateHandles {
    pub bottom: Vec<StateVars>,
    pub top: Option<StateVars>,
}

impl StateHandles {
    pub(crate) fn register<'p, T: Scalar>(tape: &mut Tape<'p, T>, state: &'p RecurrentState<T>) -> Self {
        StateHandles {
            bottom: state.bottom.iter().map(|s| StateVars::register(tape, s)).collect(),
            top: state.top.as_ref().map(|s| StateVars::register(tape, s)),
        }
    }

    pub(crate) fn zeros<T: Scalar>(tape: &mut Tape<'_, T>, model: &ModelConfig) -> Self {
        let d = model.hidden;
        let mut fresh = || StateVars {
            c: tape.constant(Tensor::zeros(d, 1)),
            h: tape.constant(Tensor::zeros(d, 1)),
        };
        match model.arch {
            Arch::DaLstm => StateHandles {
                bottom: vec![fresh()],
                top: Some(fresh()),
            },
            Arch::StackedLstm => StateHandles {
                bottom: (0..model.cells).map(|_| fresh()).collect(),
                top: None,
            },
            Arch::DeepTransitionLstm => StateHandles {
                bottom: vec![fresh()],
                top: None,
            },
        }
    }

    pub(crate) fn read<T: Scalar>(&self, tape: &Tape<'_, T>) -> RecurrentState<T> {
        RecurrentState {
            bottom: self.bottom.iter().map(|s| s.read(tape)).collect(),
            top: self.top.map(|s| s.read(tape)),
        }
    }
}

pub(crate) struct StepVars {
    pub state: StateHandles,
    pub logits: Var,
    /// `(p, e)` per evaluated cell, `None` for ungated cells.
    pub gates: Vec<Option<(Var, Var)>>,
}

impl StepVars {
    pub(crate) fn trace<T: Scalar>(&self, tape: &Tape<'_, T>, hidden: usize) -> StepTrace<T> {
        let mut trace = StepTrace {
            portions: Vec::with_capacity(self.gates.len()),
            masks: Vec::with_capacity(self.gates.len()),
            mults: Vec::with_capacity(self.gates.len()),
        };
        for g in &self.gates {
            match g {
                Some((p, e)) => {
                    let pv = tape.value(*p).item();
                    trace.portions.push(Some(pv));
                    trace.masks.push(Some(tape.value(*e).clone()));
                    trace.mults.push(CostModel::new(hidden, true).cell_cost(pv.as_f64()));
                }
                None => {
                    trace.portions.push(None);
                    trace.masks.push(None);
                    trace.mults.push(CostModel::new(hidden, false).full_cost());
                }
            }
        }
        trace
    }

    /// Portion values and cost without cloning masks.
    pub(crate) fn portions<T: Scalar>(&self, tape: &Tape<'_, T>, hidden: usize) -> (Vec<f64>, u64) {
        let mut ps = Vec::new();
        let mut cost = 0;
        for g in &self.gates {
            match g {
                Some((p, _)) => {
                    let pv = tape.value(*p).item().as_f64();
                    ps.push(pv);
                    cost += CostModel::new(hidden, true).cell_cost(pv);
                }
                None => cost += CostModel::new(hidden, false).full_cost(),
            }
        }
        (ps, cost)
    }
}

pub(crate) fn step_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    config: &ModelConfig,
    vars: &ModelVars,
    consts: &StepConstants,
    prev: &StateHandles,
    x_raw: Var,
) -> Result<StepVars> {
    let x = tape.linear(vars.in_w, x_raw, vars.in_b)?;
    let mc = &config.mask;
    let (state, top_h, gates) = match config.arch {
        Arch::DaLstm => {
            let top_cell = vars.top.as_ref().expect("da_lstm has a top cell");
            let prev_top = prev.top.expect("da_lstm state has a top cell");
            let m = vars.bottom.len();
            let mut gates = Vec::with_capacity(m + 1);

            let b1 = gated_cell(tape, &vars.bottom[0], prev.bottom[0], x, mc, consts.source())?;
            gates.push(Some((b1.p, b1.e)));
            let top = gated_cell(tape, top_cell, prev_top, b1.state.h, mc, consts.source())?;
            gates.push(Some((top.p, top.e)));
            let mut cur = b1.state;
            for cell in &vars.bottom[1..m - 1] {
                let out = gated_cell(tape, cell, cur, consts.zero, mc, consts.source())?;
                gates.push(Some((out.p, out.e)));
                cur = out.state;
            }
            let last = gated_cell(tape, &vars.bottom[m - 1], cur, top.state.h, mc, consts.source())?;
            gates.push(Some((last.p, last.e)));
            (
                StateHandles {
                    bottom: vec![last.state],
                    top: Some(top.state),
                },
                last.state.h,
                gates,
            )
        }
        Arch::StackedLstm => {
            let mut states = Vec::with_capacity(vars.bottom.len());
            let mut input = x;
            for (cell, prev_layer) in vars.bottom.iter().zip(&prev.bottom) {
                let s = lstm_cell(tape, cell, *prev_layer, input)?;
                input = s.h;
                states.push(s);
            }
            let n = states.len();
            (
                StateHandles {
                    bottom: states,
                    top: None,
                },
                input,
                vec![None; n],
            )
        }
        Arch::DeepTransitionLstm => {
            let mut cur = lstm_cell(tape, &vars.bottom[0], prev.bottom[0], x)?;
            for cell in &vars.bottom[1..] {
                cur = lstm_cell(tape, cell, cur, consts.zero)?;
            }
            (
                StateHandles {
                    bottom: vec![cur],
                    top: None,
                },
                cur.h,
                vec![None; vars.bottom.len()],
            )
        }
    };
    let logits = tape.linear(vars.out_w, top_h, vars.out_b)?;
    Ok(StepVars { state, logits, gates })
}

fn require(model: &ModelConfig, arch: Arch) -> Result<()> {
    if model.arch != arch {
        return Err(Error::Contract(format!(
            "{} step called on a {} model",
            arch.name(),
            model.arch.name()
        )));
    }
    Ok(())
}

/// Output of one depth-adaptive step.
#[derive(Clone, Debug, PartialEq)]
pub struct DaStepOutput<T> {
    /// State of `B_m`, consumed by `B_1` at the next step.
    pub bottom: CellState<T>,
    pub top: CellState<T>,
    pub logits: Tensor<T>,
    pub trace: StepTrace<T>,
}

pub fn da_lstm_step<T: Scalar>(
    model: &Model<T>,
    prev_bottom: &CellState<T>,
    prev_top: &CellState<T>,
    x_raw: &Tensor<T>,
) -> Result<DaStepOutput<T>> {
    da_lstm_step_with(model, prev_bottom, prev_top, x_raw, UpdateMode::Adaptive)
}

pub fn da_lstm_step_with<T: Scalar>(
    model: &Model<T>,
    prev_bottom: &CellState<T>,
    prev_top: &CellState<T>,
    x_raw: &Tensor<T>,
    mode: UpdateMode,
) -> Result<DaStepOutput<T>> {
    require(&model.config, Arch::DaLstm)?;
    let state = RecurrentState {
        bottom: vec![prev_bottom.clone()],
        top: Some(prev_top.clone()),
    };
    let out = model.step_with(&state, x_raw, mode)?;
    let mut bottom = out.state.bottom;
    Ok(DaStepOutput {
        bottom: bottom.pop().expect("one bottom state"),
        top: out.state.top.expect("top state"),
        logits: out.logits,
        trace: out.trace,
    })
}

/// One stacked step: layer `k` reads layer `k − 1`'s fresh hidden output and
/// its own previous state. Returns the new per-layer states and logits.
pub fn stacked_step<T: Scalar>(
    model: &Model<T>,
    prev_states: &[CellState<T>],
    x_raw: &Tensor<T>,
) -> Result<(Vec<CellState<T>>, Tensor<T>)> {
    require(&model.config, Arch::StackedLstm)?;
    let state = RecurrentState {
        bottom: prev_states.to_vec(),
        top: None,
    };
    let out = model.step(&state, x_raw)?;
    Ok((out.state.bottom, out.logits))
}

/// One deep-transition step: `m` ungated cells chained within the step.
pub fn deep_transition_step<T: Scalar>(
    model: &Model<T>,
    prev: &CellState<T>,
    x_raw: &Tensor<T>,
) -> Result<(CellState<T>, Tensor<T>)> {
    require(&model.config, Arch::DeepTransitionLstm)?;
    let state = RecurrentState {
        bottom: vec![prev.clone()],
        top: None,
    };
    let mut out = model.step(&state, x_raw)?;
    Ok((out.state.bottom.pop().expect("one state"), out.logits))
}

/// Logits for every step of a sequence plus per-step traces.
#[derive(Clone, Debug)]
pub struct SequenceOutput<T> {
    /// `n × num_classes`.
    pub logits: Tensor<T>,
    pub traces: Vec<StepTrace<T>>,
    pub final_state: RecurrentState<T>,
}

pub(crate) fn split_rows<T: Scalar>(sequence: &Tensor<T>) -> Vec<Tensor<T>> {
    (0..sequence.rows())
        .map(|r| Tensor::vector(sequence.row(r).to_vec()))
        .collect()
}

/// Runs the model over an `n × input_dim` sequence from zero initial state.
pub fn forward_sequence<T: Scalar>(model: &Model<T>, sequence: &Tensor<T>) -> Result<SequenceOutput<T>> {
    forward_sequence_with(model, sequence, UpdateMode::Adaptive)
}

pub fn forward_sequence_with<T: Scalar>(
    model: &Model<T>,
    sequence: &Tensor<T>,
    mode: UpdateMode,
) -> Result<SequenceOutput<T>> {
    if sequence.rows() == 0 {
        return Err(Error::Empty("sequence"));
    }
    if sequence.cols() != model.config.input_dim {
        return Err(Error::Dimension {
            op: "forward_sequence",
            left: (sequence.rows(), model.config.input_dim),
            right: sequence.shape(),
        });
    }
    let rows = split_rows(sequence);
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, &model.params);
    let consts = StepConstants::new(&mut tape, model.config.hidden, mode);
    let mut state = StateHandles::zeros(&mut tape, &model.config);
    let k = model.config.num_classes;
    let mut logits = Vec::with_capacity(rows.len() * k);
    let mut traces = Vec::with_capacity(rows.len());
    for row in &rows {
        let x = tape.input(row);
        let out = step_on_tape(&mut tape, &model.config, &vars, &consts, &state, x)?;
        logits.extend_from_slice(tape.value(out.logits).data());
        traces.push(out.trace(&tape, model.config.hidden));
        state = out.state;
    }
    Ok(SequenceOutput {
        logits: Tensor::from_vec(rows.len(), k, logits)?,
        traces,
        final_state: state.read(&tape),
    })
}
