//! Recurrent convolutional layers: bottom-up, lateral and top-down wiring,
//! unrolled over discrete time steps with optional evidence accumulation.
//!
//! Update order within a step is synchronous: layers are computed bottom to
//! top at step `t`, and every recurrent input reads the activations stored at
//! step `t - 1`. At `t = 0` recurrent inputs are zero and are simply omitted.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{ConvParams, ConvTerm, Tape, Var};
use crate::error::{Error, Result};

/// Which recurrent connections a layer stack uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Wiring {
    /// Bottom-up only; a plain feed-forward CNN.
    B,
    BL,
    BT,
    BLT,
}

impl Wiring {
    pub const ALL: [Wiring; 4] = [Wiring::B, Wiring::BL, Wiring::BT, Wiring::BLT];

    pub fn lateral(self) -> bool {
        matches!(self, Wiring::BL | Wiring::BLT)
    }

    pub fn top_down(self) -> bool {
        matches!(self, Wiring::BT | Wiring::BLT)
    }

    pub fn is_recurrent(self) -> bool {
        self != Wiring::B
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Wiring::B => "B",
            Wiring::BL => "BL",
            Wiring::BT => "BT",
            Wiring::BLT => "BLT",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Wiring::B => 0,
            Wiring::BL => 1,
            Wiring::BT => 2,
            Wiring::BLT => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Wiring::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Wiring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Wiring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Wiring::ALL
            .into_iter()
            .find(|w| w.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown wiring {s:?}")))
    }
}

/// One recurrent convolutional layer with its weights bound to a tape.
///
/// The bias lives on `bottom_up` and is shared by all terms and time steps.
/// `top_down` takes a transposed-convolution kernel `[C_above, C, k, k]` and is
/// only allowed on the first layer.
#[derive(Clone, Debug)]
pub struct RclLayer {
    /// 1-based position in the stack.
    pub index: usize,
    pub bottom_up: ConvParams,
    pub lateral: Option<ConvParams>,
    pub top_down: Option<ConvParams>,
}

/// Pre-activation of one layer at one time step.
///
/// Recurrent inputs are `None` at the first time step (they read as zero) or
/// when the wiring excludes them.
pub fn preactivation(
    tape: &mut Tape,
    layer: &RclLayer,
    h_below: Var,
    h_self_prev: Option<Var>,
    h_above_prev: Option<Var>,
    wiring: Wiring,
) -> Result<Var> {
    if layer.top_down.is_some() && layer.index != 1 {
        return Err(Error::Config(format!(
            "layer {} has a top-down kernel; only layer 1 receives top-down input",
            layer.index
        )));
    }
    if wiring.lateral() && layer.lateral.is_none() {
        return Err(Error::Config(format!(
            "wiring {wiring} needs a lateral kernel on layer {}",
            layer.index
        )));
    }
    if wiring.top_down() && layer.index == 1 && layer.top_down.is_none() {
        return Err(Error::Config(format!(
            "wiring {wiring} needs a top-down kernel on layer 1"
        )));
    }

    let mut terms = vec![ConvTerm::conv(h_below, layer.bottom_up)];
    match (h_self_prev, wiring.lateral()) {
        (Some(h), true) => terms.push(ConvTerm::conv(h, layer.lateral.expect("checked above"))),
        (Some(_), false) => {
            return Err(Error::Config(format!(
                "lateral input supplied to layer {} but wiring {wiring} has none",
                layer.index
            )))
        }
        (None, _) => {}
    }
    match (h_above_prev, layer.top_down.filter(|_| wiring.top_down())) {
        (Some(h), Some(td)) => terms.push(ConvTerm::transposed(h, td)),
        (Some(_), None) => {
            return Err(Error::Config(format!(
                "top-down input supplied to layer {} but it has no top-down connection under {wiring}",
                layer.index
            )))
        }
        (None, _) => {}
    }
    tape.conv_sum(&terms, layer.bottom_up.bias)
}

/// Running sum of final-layer pre-activations across time steps.
pub fn ea_accumulate(tape: &mut Tape, z_now: Var, z_prev_accum: Option<Var>) -> Result<Var> {
    match z_prev_accum {
        None => Ok(z_now),
        Some(prev) => tape.add(z_now, prev),
    }
}

/// Convolution followed by global average pooling: `[B, C, H, W] -> [B, n_out]`.
pub fn readout(tape: &mut Tape, h_top: Var, out_conv: &ConvParams) -> Result<Var> {
    let maps = tape.conv2d(h_top, out_conv)?;
    tape.global_avg_pool(maps)
}

/// Which time steps [`unroll`] should read out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readouts {
    EveryStep,
    FinalStep,
}

/// A stack of recurrent layers plus its readout convolution.
#[derive(Clone, Debug)]
pub struct RclStack {
    pub wiring: Wiring,
    pub layers: Vec<RclLayer>,
    pub readout: ConvParams,
}

/// Run the stack for `steps` time steps, feeding the same `input` each step.
///
/// Returns logits for every step (or only the last, per `which`). With `ea`
/// the readout at step `t` consumes `relu(z_0 + ... + z_t)` of the final
/// layer; the accumulator never feeds back into the recurrence.
pub fn unroll(
    tape: &mut Tape,
    stack: &RclStack,
    input: Var,
    steps: usize,
    ea: bool,
    which: Readouts,
) -> Result<Vec<Var>> {
    if steps < 1 {
        return Err(Error::Config("unroll needs at least one time step".into()));
    }
    if stack.layers.is_empty() {
        return Err(Error::Config("layer stack is empty".into()));
    }
    let depth = stack.layers.len();
    let mut prev: Vec<Option<Var>> = vec![None; depth];
    let mut accum: Option<Var> = None;
    let mut logits = Vec::with_capacity(steps);

    for t in 0..steps {
        let mut below = input;
        let mut current = Vec::with_capacity(depth);
        let mut top_for_readout = None;
        for (m, layer) in stack.layers.iter().enumerate() {
            let lateral_in = if stack.wiring.lateral() { prev[m] } else { None };
            let top_down_in = if stack.wiring.top_down() && m == 0 && depth > 1 {
                prev[1]
            } else {
                None
            };
            let z = preactivation(tape, layer, below, lateral_in, top_down_in, stack.wiring)?;
            let h = tape.relu(z);
            if m + 1 == depth {
                top_for_readout = Some(if ea {
                    let acc = ea_accumulate(tape, z, accum)?;
                    accum = Some(acc);
                    tape.relu(acc)
                } else {
                    h
                });
            }
            current.push(Some(h));
            below = h;
        }
        prev = current;
        if which == Readouts::EveryStep || t + 1 == steps {
            let top = top_for_readout.expect("stack has at least one layer");
            logits.push(readout(tape, top, &stack.readout)?);
        }
    }
    Ok(logits)
}
