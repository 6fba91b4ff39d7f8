//! LSTM cells: the vanilla cell and the portion-gated cell that updates only
//! a leading fraction of its state dimensions.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{init_params, sigmoid, InitScheme, Tensor};
use serde::{Deserialize, Serialize};

/// Affine map of one gate: `w·h + u·x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams<T> {
    pub w: Tensor<T>,
    pub u: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> GateParams<T> {
    fn zeros(d: usize) -> Self {
        GateParams {
            w: Tensor::zeros(d, d),
            u: Tensor::zeros(d, d),
            b: Tensor::zeros(d, 1),
        }
    }

    fn init(d: usize, seed: u64) -> Self {
        GateParams {
            w: init_params(d, d, seed, InitScheme::Uniform),
            u: init_params(d, d, seed.wrapping_add(1), InitScheme::Uniform),
            b: Tensor::zeros(d, 1),
        }
    }
}

/// Scalar portion gate: `p = σ(w·h + u·x + b)` with `w`, `u` of shape `1 × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct PortionParams<T> {
    pub w: Tensor<T>,
    pub u: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellParams<T> {
    pub forget: GateParams<T>,
    pub input: GateParams<T>,
    pub output: GateParams<T>,
    pub candidate: GateParams<T>,
    pub portion: Option<PortionParams<T>>,
}

impl<T: Scalar> CellParams<T> {
    pub fn zeros(d: usize, portion_gate: bool) -> Self {
        CellParams {
            forget: GateParams::zeros(d),
            input: GateParams::zeros(d),
            output: GateParams::zeros(d),
            candidate: GateParams::zeros(d),
            portion: portion_gate.then(|| PortionParams {
                w: Tensor::zeros(1, d),
                u: Tensor::zeros(1, d),
                b: Tensor::zeros(1, 1),
            }),
        }
    }

    /// Weights uniform in `±1/sqrt(D)`, biases zero.
    pub fn init(d: usize, portion_gate: bool, seed: u64) -> Self {
        let s = seed.wrapping_mul(16);
        CellParams {
            forget: GateParams::init(d, s),
            input: GateParams::init(d, s + 2),
            output: GateParams::init(d, s + 4),
            candidate: GateParams::init(d, s + 6),
            portion: portion_gate.then(|| PortionParams {
                w: init_params(1, d, s + 8, InitScheme::Uniform),
                u: init_params(1, d, s + 9, InitScheme::Uniform),
                b: Tensor::zeros(1, 1),
            }),
        }
    }

    pub fn hidden(&self) -> usize {
        self.forget.w.rows()
    }

    pub fn has_portion_gate(&self) -> bool {
        self.portion.is_some()
    }

    pub fn gates(&self) -> [&GateParams<T>; 4] {
        [&self.forget, &self.input, &self.output, &self.candidate]
    }

    /// Tensors in a fixed order, paired with their names.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = Vec::with_capacity(15);
        for (k, g) in self.gates().into_iter().enumerate() {
            out.push((W_NAMES[k], &g.w));
            out.push((U_NAMES[k], &g.u));
            out.push((B_NAMES[k], &g.b));
        }
        if let Some(p) = &self.portion {
            out.push(("w_p", &p.w));
            out.push(("u_p", &p.u));
            out.push(("b_p", &p.b));
        }
        out
    }

    /// Same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::with_capacity(15);
        for g in [
            &mut self.forget,
            &mut self.input,
            &mut self.output,
            &mut self.candidate,
        ] {
            out.push(&mut g.w);
            out.push(&mut g.u);
            out.push(&mut g.b);
        }
        if let Some(p) = &mut self.portion {
            out.push(&mut p.w);
            out.push(&mut p.u);
            out.push(&mut p.b);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.hidden();
        for g in self.gates() {
            for (m, op) in [(&g.w, "gate w"), (&g.u, "gate u")] {
                if m.shape() != (d, d) {
                    return Err(Error::Dimension {
                        op,
                        left: (d, d),
                        right: m.shape(),
                    });
                }
            }
            if g.b.shape() != (d, 1) {
                return Err(Error::Dimension {
                    op: "gate bias",
                    left: (d, 1),
                    right: g.b.shape(),
                });
            }
        }
        if let Some(p) = &self.portion {
            for (t, want, op) in [
                (&p.w, (1, d), "portion w"),
                (&p.u, (1, d), "portion u"),
                (&p.b, (1, 1), "portion b"),
            ] {
                if t.shape() != want {
                    return Err(Error::Dimension {
                        op,
                        left: want,
                        right: t.shape(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Copy without the portion gate.
    pub fn without_portion_gate(&self) -> Self {
        CellParams {
            portion: None,
            ..self.clone()
        }
    }
}

const W_NAMES: [&str; 4] = ["w_f", "w_i", "w_o", "w_c"];
const U_NAMES: [&str; 4] = ["u_f", "u_i", "u_o", "u_c"];
const B_NAMES: [&str; 4] = ["b_f", "b_i", "b_o", "b_c"];

/// Memory and hidden vectors threaded through time.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState<T> {
    pub c: Tensor<T>,
    pub h: Tensor<T>,
}

impl<T: Scalar> CellState<T> {
    pub fn zeros(d: usize) -> Self {
        CellState {
            c: Tensor::zeros(d, 1),
            h: Tensor::zeros(d, 1),
        }
    }
}

/// Threshold `ε` and sharpness `λ` of the soft mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConstants {
    pub epsilon: f64,
    pub lambda: f64,
}

impl Default for MaskConstants {
    fn default() -> Self {
        MaskConstants {
            epsilon: 0.01,
            lambda: 20.0,
        }
    }
}

impl MaskConstants {
    pub fn new(epsilon: f64, lambda: f64) -> Result<Self> {
        let mc = MaskConstants { epsilon, lambda };
        mc.validate()?;
        Ok(mc)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!(
                "mask epsilon must lie in (0, 0.5), got {}",
                self.epsilon
            )));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "mask lambda must be positive, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Which piece of the threshold function produced a mask entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskBranch {
    Off,
    Soft,
    On,
}

/// `0` below `ε`, `1` above `1 − ε`, identity in between.
#[inline]
pub fn thres<T: Scalar>(x: T, epsilon: T) -> T {
    if x < epsilon {
        T::zero()
    } else if x > T::one() - epsilon {
        T::one()
    } else {
        x
    }
}

/// Entry `i` (1-based) of the soft mask, its branch, and `d e_i / d p`.
#[inline]
pub(crate) fn mask_entry<T: Scalar>(p: T, i: usize, d: usize, mc: &MaskConstants) -> (T, MaskBranch, T) {
    let lambda = T::of(mc.lambda);
    let eps = T::of(mc.epsilon);
    let dd = T::of(d as f64);
    let s = sigmoid(lambda * (p * dd - T::of(i as f64)));
    if s < eps {
        (T::zero(), MaskBranch::Off, T::zero())
    } else if s > T::one() - eps {
        (T::one(), MaskBranch::On, T::zero())
    } else {
        (s, MaskBranch::Soft, lambda * dd * s * (T::one() - s))
    }
}

/// `e_i = thres(σ(λ(pD − i)))` for `i = 1..=D`.
pub fn soft_mask<T: Scalar>(p: T, d: usize, mc: &MaskConstants) -> Tensor<T> {
    Tensor::vector((1..=d).map(|i| mask_entry(p, i, d, mc).0).collect())
}

/// `d e / d p` per entry; zero wherever the threshold clips.
pub fn soft_mask_slope<T: Scalar>(p: T, d: usize, mc: &MaskConstants) -> Tensor<T> {
    Tensor::vector((1..=d).map(|i| mask_entry(p, i, d, mc).2).collect())
}

/// Parameter handles of one cell registered on a tape.
#[derive(Clone, Debug)]
pub(crate) struct CellVars {
    gates: [[Var; 3]; 4],
    portion: Option<[Var; 3]>,
    hidden: usize,
}

impl CellVars {
    pub(crate) fn register<'p, T: Scalar>(tape: &mut Tape<'p, T>, params: &'p CellParams<T>) -> Self {
        let gates = params.gates().map(|g| [tape.param(&g.w), tape.param(&g.u), tape.param(&g.b)]);
        let portion = params
            .portion
            .as_ref()
            .map(|p| [tape.param(&p.w), tape.param(&p.u), tape.param(&p.b)]);
        CellVars {
            gates,
            portion,
            hidden: params.hidden(),
        }
    }

    /// Handles in [`CellParams::named_tensors`] order.
    pub(crate) fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.gates.iter().flatten().copied().collect();
        if let Some(p) = self.portion {
            out.extend(p);
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct StateVars {
    pub c: Var,
    pub h: Var,
}

impl StateVars {
    pub(crate) fn register<'p, T: Scalar>(tape: &mut Tape<'p, T>, state: &'p CellState<T>) -> Self {
        StateVars {
            c: tape.input(&state.c),
            h: tape.input(&state.h),
        }
    }

    pub(crate) fn read<T: Scalar>(&self, tape: &Tape<'_, T>) -> CellState<T> {
        CellState {
            c: tape.value(self.c).clone(),
            h: tape.value(self.h).clone(),
        }
    }
}

/// How the gated cell obtains its mask.
#[derive(Clone, Copy, Debug)]
pub(crate) enum MaskSource {
    /// From the portion gate.
    Portion,
    /// A fixed mask supplied by the caller; the portion gate is still evaluated.
    Fixed(Var),
}

/// Gate stage shared by both cell kinds, reading `(h, x)` as given.
fn lstm_update<T: Scalar>(tape: &mut Tape<'_, T>, cell: &CellVars, prev_c: Var, h: Var, x: Var) -> Result<StateVars> {
    let [f, i, o, c] = cell.gates;
    let f = tape.gate(f[0], h, f[1], x, f[2])?;
    let f = tape.sigmoid(f);
    let i = tape.gate(i[0], h, i[1], x, i[2])?;
    let i = tape.sigmoid(i);
    let o = tape.gate(o[0], h, o[1], x, o[2])?;
    let o = tape.sigmoid(o);
    let cand = tape.gate(c[0], h, c[1], x, c[2])?;
    let cand = tape.tanh(cand);
    let kept = tape.mul(f, prev_c)?;
    let written = tape.mul(i, cand)?;
    let c = tape.add(kept, written)?;
    let squashed = tape.tanh(c);
    let h = tape.mul(o, squashed)?;
    Ok(StateVars { c, h })
}

pub(crate) fn lstm_cell<T: Scalar>(tape: &mut Tape<'_, T>, cell: &CellVars, prev: StateVars, x: Var) -> Result<StateVars> {
    lstm_update(tape, cell, prev.c, prev.h, x)
}

pub(crate) fn portion_var<T: Scalar>(tape: &mut Tape<'_, T>, cell: &CellVars, h: Var, x: Var) -> Result<Var> {
    let [w, u, b] = cell
        .portion
        .ok_or_else(|| Error::Contract("portion gate evaluated on a cell without one".into()))?;
    let z = tape.gate(w, h, u, x, b)?;
    Ok(tape.sigmoid(z))
}

/// Output of one portion-gated step on a tape.
pub(crate) struct GatedVars {
    pub state: StateVars,
    pub p: Var,
    pub e: Var,
}

pub(crate) fn gated_cell<T: Scalar>(
    tape: &mut Tape<'_, T>,
    cell: &CellVars,
    prev: StateVars,
    x: Var,
    mc: &MaskConstants,
    source: MaskSource,
) -> Result<GatedVars> {
    let p = portion_var(tape, cell, prev.h, x)?;
    let e = match source {
        MaskSource::Portion => tape.soft_mask(p, cell.hidden, mc)?,
        MaskSource::Fixed(e) => e,
    };
    let h_trunc = tape.mul(prev.h, e)?;
    let x_trunc = tape.mul(x, e)?;
    let fresh = lstm_update(tape, cell, prev.c, h_trunc, x_trunc)?;
    let c = tape.blend(e, fresh.c, prev.c)?;
    let h = tape.blend(e, fresh.h, prev.h)?;
    Ok(GatedVars {
        state: StateVars { c, h },
        p,
        e,
    })
}

fn check_inputs<T: Scalar>(params: &CellParams<T>, prev: &CellState<T>, x: &Tensor<T>) -> Result<()> {
    params.validate()?;
    let d = params.hidden();
    for (t, op) in [(&prev.c, "state c"), (&prev.h, "state h"), (x, "cell input")] {
        if !t.is_vector() || t.len() != d {
            return Err(Error::Dimension {
                op,
                left: (d, 1),
                right: t.shape(),
            });
        }
    }
    Ok(())
}

/// One vanilla LSTM step (no peepholes).
pub fn lstm_step<T: Scalar>(params: &CellParams<T>, prev: &CellState<T>, x: &Tensor<T>) -> Result<CellState<T>> {
    check_inputs(params, prev, x)?;
    let mut tape = Tape::new();
    let cell = CellVars::register(&mut tape, params);
    let prev_v = StateVars::register(&mut tape, prev);
    let xv = tape.input(x);
    Ok(lstm_cell(&mut tape, &cell, prev_v, xv)?.read(&tape))
}

/// Portion value from the full (unmasked) previous hidden state and input.
pub fn portion_gate<T: Scalar>(params: &CellParams<T>, prev_h: &Tensor<T>, x: &Tensor<T>) -> Result<T> {
    if !params.has_portion_gate() {
        return Err(Error::Contract("cell has no portion gate".into()));
    }
    let d = params.hidden();
    check_inputs(params, &CellState { c: prev_h.clone(), h: prev_h.clone() }, x)?;
    let mut tape = Tape::new();
    let cell = CellVars::register(&mut tape, params);
    let (hv, xv) = (tape.input(prev_h), tape.input(x));
    let p = portion_var(&mut tape, &cell, hv, xv)?;
    debug_assert_eq!(cell.hidden, d);
    Ok(tape.value(p).item())
}

/// Result of a portion-gated step.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedStep<T> {
    pub state: CellState<T>,
    pub p: T,
    pub e: Tensor<T>,
}

/// One portion-gated step: compute `p` and the soft mask `e`, run the LSTM
/// update on the truncated `(h ∘ e, x ∘ e)`, then blend the fresh state with
/// the previous one so dimensions with `e_i = 0` are carried over unchanged.
pub fn da_step<T: Scalar>(
    params: &CellParams<T>,
    prev: &CellState<T>,
    x: &Tensor<T>,
    mc: &MaskConstants,
) -> Result<GatedStep<T>> {
    check_inputs(params, prev, x)?;
    if !params.has_portion_gate() {
        return Err(Error::Contract("da_step requires a portion-gated cell".into()));
    }
    let mut tape = Tape::new();
    let cell = CellVars::register(&mut tape, params);
    let prev_v = StateVars::register(&mut tape, prev);
    let xv = tape.input(x);
    let out = gated_cell(&mut tape, &cell, prev_v, xv, mc, MaskSource::Portion)?;
    Ok(GatedStep {
        state: out.state.read(&tape),
        p: tape.value(out.p).item(),
        e: tape.value(out.e).clone(),
    })
}

/// [`da_step`] with the mask replaced by `e`.
pub fn da_step_with_mask<T: Scalar>(
    params: &CellParams<T>,
    prev: &CellState<T>,
    x: &Tensor<T>,
    e: &Tensor<T>,
) -> Result<CellState<T>> {
    check_inputs(params, prev, x)?;
    if e.len() != params.hidden() {
        return Err(Error::Dimension {
            op: "mask",
            left: (params.hidden(), 1),
            right: e.shape(),
        });
    }
    let mut tape = Tape::new();
    let cell = CellVars::register(&mut tape, params);
    let prev_v = StateVars::register(&mut tape, prev);
    let xv = tape.input(x);
    let ev = tape.input(e);
    let mc = MaskConstants::default();
    Ok(gated_cell(&mut tape, &cell, prev_v, xv, &mc, MaskSource::Fixed(ev))?
        .state
        .read(&tape))
}
