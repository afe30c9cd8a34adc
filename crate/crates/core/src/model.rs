//! The factorized note model and its ablation variants.
//!
//! Every variant predicts note `n+1` in three stages: `dT`, then `T` given
//! `dT`, then `P` given `dT` and `T` (the conditioning is dropped by
//! [`Variant::IndepBp`]). Recurrent variants are described as a small graph:
//! a list of GRU stacks, each fed one-hot note features, and three readout
//! heads fed from stack layers and one-hot next-note features. The MLP variant
//! replaces the stacks with a feed-forward trunk over the last few notes.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, relu_inplace, softmax_rows, Dense, GruCache, GruLayer, Input, NnError, ParamLayout, Slot};
use crate::score::{Dictionaries, EncodedScore, Feature, ScoreError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("unknown model variant {0:?}")]
    UnknownVariant(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    BachProp,
    IndepBp,
    Mlp,
    PolyDac,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::BachProp, Variant::IndepBp, Variant::Mlp, Variant::PolyDac];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::BachProp => "bachprop",
            Variant::IndepBp => "indepbp",
            Variant::Mlp => "mlp",
            Variant::PolyDac => "polydac",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ModelError::UnknownVariant(s.to_string()))
    }
}

/// Layer widths for a variant.
///
/// * `BachProp`, `IndepBp`: `widths` are the three stacked GRU layers.
/// * `PolyDac`: `widths[i]` is the (uniform) layer width of the network
///   for feature `i` (`dT`, `T`, `P`), each with `layers` GRU layers.
/// * `Mlp`: `widths` are the hidden ReLU layers; `context` notes are read.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub variant: Variant,
    pub widths: Vec<usize>,
    pub layers: usize,
    pub context: usize,
}

impl Architecture {
    /// The published sizes.
    pub fn standard(variant: Variant) -> Self {
        let widths = match variant {
            Variant::BachProp | Variant::IndepBp => vec![128; 3],
            Variant::PolyDac => vec![16, 128, 256],
            Variant::Mlp => vec![124; 3],
        };
        Architecture { variant, widths, layers: 3, context: 5 }
    }

    /// Same topology with every width set to `width`.
    pub fn uniform(variant: Variant, width: usize) -> Self {
        Architecture { widths: vec![width; 3], ..Self::standard(variant) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Src {
    /// Feature of the current note `n` (lag 0) or of note `n - lag`.
    Hist(usize, Feature),
    /// Feature of note `n + 1` (teacher-forced or already sampled).
    Next(Feature),
    Layer(usize, usize),
    Trunk,
}

#[derive(Debug, Clone)]
struct Stack {
    inputs: Vec<Src>,
    layers: Vec<GruLayer>,
    /// Consumes next-note features, so it can only step once they are known.
    deferred: bool,
}

#[derive(Debug, Clone)]
struct Head {
    inputs: Vec<Src>,
    hidden: Dense,
    out: Dense,
}

#[derive(Debug, Clone)]
struct Trunk {
    inputs: Vec<Src>,
    layers: Vec<Dense>,
}

/// Network parameters plus the dictionaries they index.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Architecture,
    pub dicts: Dictionaries,
    pub params: Vec<f64>,
    layout: ParamLayout,
    stacks: Vec<Stack>,
    trunk: Option<Trunk>,
    heads: Vec<Head>,
}

/// Per-slot feature indices for one time step of a batch; `None` marks
/// padding or a masked input.
#[derive(Debug, Clone)]
pub struct StepIdx {
    /// `hist[lag][feature]`, lag 0 is the current note.
    hist: Vec<[Vec<Option<usize>>; 3]>,
    next: [Vec<Option<usize>>; 3],
    none: Vec<Option<usize>>,
}

impl StepIdx {
    fn batch(&self) -> usize {
        self.none.len()
    }
}

/// A window of consecutive steps for a group of songs.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub steps: Vec<StepIdx>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Number of positions that carry a prediction target.
    pub fn targets(&self) -> usize {
        self.steps.iter().map(|s| s.next[0].iter().flatten().count()).sum()
    }
}

/// Recurrent state of every stack layer, one row per batch slot.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub layers: Vec<Vec<Array2<f64>>>,
}

/// Summed losses and hit counts over predicted positions.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PassStats {
    pub ce: [f64; 3],
    pub correct: [usize; 3],
    pub positions: usize,
}

impl PassStats {
    pub fn add(&mut self, other: &PassStats) {
        for k in 0..3 {
            self.ce[k] += other.ce[k];
            self.correct[k] += other.correct[k];
        }
        self.positions += other.positions;
    }

    /// Mean over positions of the mean of the three cross-entropies.
    pub fn nll(&self) -> f64 {
        if self.positions == 0 {
            return 0.0;
        }
        self.ce.iter().sum::<f64>() / (3.0 * self.positions as f64)
    }

    pub fn accuracy(&self) -> [f64; 3] {
        if self.positions == 0 {
            return [0.0; 3];
        }
        self.correct.map(|c| c as f64 / self.positions as f64)
    }

    pub fn total_ce(&self) -> f64 {
        self.ce.iter().sum()
    }
}

struct HeadCache {
    hidden: Array2<f64>,
    probs: Array2<f64>,
}

struct StepCache {
    stacks: Vec<Vec<GruCache>>,
    /// Per head: trunk activations after each layer (MLP only).
    trunk: Vec<Vec<Array2<f64>>>,
    heads: Vec<HeadCache>,
}

const HEAD_NAMES: [&str; 3] = ["head_dt", "head_t", "head_p"];

impl Model {
    /// Builds a variant with the published widths and fresh weights.
    pub fn build<R: Rng + ?Sized>(variant: Variant, dicts: &Dictionaries, rng: &mut R) -> Result<Self, ModelError> {
        Self::with_architecture(Architecture::standard(variant), dicts, rng)
    }

    pub fn with_architecture<R: Rng + ?Sized>(
        arch: Architecture,
        dicts: &Dictionaries,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let mut model = Self::skeleton(arch, dicts)?;
        model.params = model.layout.initialize(rng);
        Ok(model)
    }

    /// Topology with all-zero parameters.
    pub fn skeleton(arch: Architecture, dicts: &Dictionaries) -> Result<Self, ModelError> {
        if arch.widths.len() != 3 || arch.widths.contains(&0) || arch.layers == 0 || arch.context == 0 {
            return Err(ModelError::InvalidConfig(format!("unsupported architecture {arch:?}")));
        }
        let sizes = dicts.sizes();
        let width = |src: &Src, stacks: &[Stack], trunk: Option<&Trunk>| -> usize {
            match *src {
                Src::Hist(_, f) | Src::Next(f) => sizes[f as usize],
                Src::Layer(s, l) => stacks[s].layers[l].hidden,
                Src::Trunk => trunk.expect("trunk").layers.last().expect("trunk layer").output_width(),
            }
        };
        let note_inputs = |lag: usize| Feature::ALL.map(|f| Src::Hist(lag, f)).to_vec();

        let mut layout = ParamLayout::default();
        let mut stacks: Vec<Stack> = Vec::new();
        let mut trunk = None;

        // (stack inputs, layer widths) per stack
        let stack_specs: Vec<(Vec<Src>, Vec<usize>)> = match arch.variant {
            Variant::BachProp | Variant::IndepBp => vec![(note_inputs(0), arch.widths.clone())],
            Variant::PolyDac => (0..3)
                .map(|k| {
                    let mut inputs = note_inputs(0);
                    inputs.extend(Feature::ALL[..k].iter().map(|&f| Src::Next(f)));
                    (inputs, vec![arch.widths[k]; arch.layers])
                })
                .collect(),
            Variant::Mlp => Vec::new(),
        };
        for (s, (inputs, widths)) in stack_specs.into_iter().enumerate() {
            let mut layers: Vec<GruLayer> = Vec::new();
            for (l, &h) in widths.iter().enumerate() {
                let segments: Vec<usize> = if l == 0 {
                    inputs.iter().map(|src| width(src, &stacks, None)).collect()
                } else {
                    vec![layers[l - 1].hidden]
                };
                layers.push(GruLayer::new(&mut layout, &format!("stack{s}.gru{l}"), &segments, h));
            }
            let deferred = inputs.iter().any(|s| matches!(s, Src::Next(_)));
            stacks.push(Stack { inputs, layers, deferred });
        }

        if arch.variant == Variant::Mlp {
            let mut inputs: Vec<Src> = (0..arch.context).flat_map(note_inputs).collect();
            inputs.push(Src::Next(Feature::Dt));
            inputs.push(Src::Next(Feature::T));
            let mut layers: Vec<Dense> = Vec::new();
            for (l, &h) in arch.widths.iter().enumerate() {
                let segments: Vec<usize> = if l == 0 {
                    inputs.iter().map(|src| width(src, &stacks, None)).collect()
                } else {
                    vec![layers[l - 1].output_width()]
                };
                layers.push(Dense::new(&mut layout, &format!("trunk.dense{l}"), &segments, h));
            }
            trunk = Some(Trunk { inputs, layers });
        }

        let head_inputs: [Vec<Src>; 3] = match arch.variant {
            Variant::BachProp => [
                vec![Src::Layer(0, 0)],
                vec![Src::Layer(0, 0), Src::Layer(0, 1), Src::Next(Feature::Dt)],
                vec![
                    Src::Layer(0, 0),
                    Src::Layer(0, 1),
                    Src::Layer(0, 2),
                    Src::Next(Feature::Dt),
                    Src::Next(Feature::T),
                ],
            ],
            Variant::IndepBp => [vec![Src::Layer(0, 0)], vec![Src::Layer(0, 1)], vec![Src::Layer(0, 2)]],
            Variant::PolyDac => {
                let top = arch.layers - 1;
                [vec![Src::Layer(0, top)], vec![Src::Layer(1, top)], vec![Src::Layer(2, top)]]
            }
            Variant::Mlp => [vec![Src::Trunk], vec![Src::Trunk], vec![Src::Trunk]],
        };
        let mut heads = Vec::with_capacity(3);
        for (k, inputs) in head_inputs.into_iter().enumerate() {
            let segments: Vec<usize> = inputs.iter().map(|src| width(src, &stacks, trunk.as_ref())).collect();
            let hidden = Dense::new(&mut layout, &format!("{}.relu", HEAD_NAMES[k]), &segments, sizes[k]);
            let out = Dense::new(&mut layout, &format!("{}.softmax", HEAD_NAMES[k]), &[sizes[k]], sizes[k]);
            heads.push(Head { inputs, hidden, out });
        }

        Ok(Model {
            params: vec![0.0; layout.len],
            arch,
            dicts: dicts.clone(),
            layout,
            stacks,
            trunk,
            heads,
        })
    }

    pub fn variant(&self) -> Variant {
        self.arch.variant
    }

    pub fn param_count(&self) -> usize {
        self.layout.len
    }

    /// Parameter matrices in storage order.
    pub fn slots(&self) -> &[Slot] {
        &self.layout.slots
    }

    pub fn zero_state(&self, batch: usize) -> HiddenState {
        HiddenState {
            layers: self
                .stacks
                .iter()
                .map(|s| s.layers.iter().map(|l| Array2::zeros((batch, l.hidden))).collect())
                .collect(),
        }
    }

    fn onehot<'a>(&self, src: Src, step: &'a StepIdx, masked: bool) -> Input<'a> {
        let (f, idx) = match src {
            Src::Hist(lag, f) => (f, &step.hist[lag][f as usize]),
            Src::Next(f) => (f, &step.next[f as usize]),
            Src::Layer(..) | Src::Trunk => unreachable!("not a one-hot source"),
        };
        let idx = if masked { &step.none } else { idx };
        Input::OneHot { width: self.dicts.size(f), idx }
    }

    fn stack_inputs<'a>(&self, stack: &Stack, step: &'a StepIdx) -> Vec<Input<'a>> {
        stack.inputs.iter().map(|&src| self.onehot(src, step, false)).collect()
    }

    fn stack_forward(
        &self,
        params: &[f64],
        stack: &Stack,
        prev: &[Array2<f64>],
        step: &StepIdx,
    ) -> Result<Vec<GruCache>, ModelError> {
        let mut caches: Vec<GruCache> = Vec::with_capacity(stack.layers.len());
        for (l, layer) in stack.layers.iter().enumerate() {
            let cache = if l == 0 {
                layer.forward(params, &self.stack_inputs(stack, step), prev[0].view())?
            } else {
                layer.forward(params, &[Input::Dense(caches[l - 1].h.view())], prev[l].view())?
            };
            caches.push(cache);
        }
        Ok(caches)
    }

    /// Trunk inputs with the masking used for head `k`: the `dT` head sees
    /// neither next-note slot, the `T` head sees `dT[n+1]`, the `P` head both.
    fn trunk_inputs<'a>(&self, trunk: &Trunk, step: &'a StepIdx, k: usize) -> Vec<Input<'a>> {
        trunk
            .inputs
            .iter()
            .map(|&src| {
                let masked = match src {
                    Src::Next(f) => f as usize >= k,
                    _ => false,
                };
                self.onehot(src, step, masked)
            })
            .collect()
    }

    fn trunk_forward(&self, params: &[f64], trunk: &Trunk, step: &StepIdx, k: usize) -> Result<Vec<Array2<f64>>, ModelError> {
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(trunk.layers.len());
        for (l, layer) in trunk.layers.iter().enumerate() {
            let mut a = if l == 0 {
                layer.forward(params, &self.trunk_inputs(trunk, step, k))?
            } else {
                layer.forward(params, &[Input::Dense(acts[l - 1].view())])?
            };
            relu_inplace(&mut a);
            acts.push(a);
        }
        Ok(acts)
    }

    fn head_inputs<'a>(
        &self,
        k: usize,
        step: &'a StepIdx,
        stacks: &'a [Vec<GruCache>],
        layer_state: &'a [Vec<Array2<f64>>],
        trunk: &'a [Vec<Array2<f64>>],
    ) -> Vec<Input<'a>> {
        self.heads[k]
            .inputs
            .iter()
            .map(|&src| match src {
                Src::Layer(s, l) if stacks.is_empty() => Input::Dense(layer_state[s][l].view()),
                Src::Layer(s, l) => Input::Dense(stacks[s][l].h.view()),
                Src::Trunk => Input::Dense(trunk[k].last().expect("trunk activations").view()),
                other => self.onehot(other, step, false),
            })
            .collect()
    }

    fn head_forward(&self, params: &[f64], k: usize, inputs: &[Input]) -> Result<HeadCache, ModelError> {
        let head = &self.heads[k];
        let mut hidden = head.hidden.forward(params, inputs)?;
        relu_inplace(&mut hidden);
        let logits = head.out.forward(params, &[Input::Dense(hidden.view())])?;
        Ok(HeadCache { hidden, probs: logits })
    }

    fn step_forward(&self, params: &[f64], prev: &HiddenState, step: &StepIdx) -> Result<StepCache, ModelError> {
        let mut stacks = Vec::with_capacity(self.stacks.len());
        for (s, stack) in self.stacks.iter().enumerate() {
            stacks.push(self.stack_forward(params, stack, &prev.layers[s], step)?);
        }
        let mut trunk = Vec::new();
        if let Some(tr) = &self.trunk {
            for k in 0..3 {
                trunk.push(self.trunk_forward(params, tr, step, k)?);
            }
        }
        let mut heads = Vec::with_capacity(3);
        for k in 0..3 {
            let inputs = self.head_inputs(k, step, &stacks, &[], &trunk);
            let mut hc = self.head_forward(params, k, &inputs)?;
            hc.probs = softmax_rows(&hc.probs);
            heads.push(hc);
        }
        Ok(StepCache { stacks, trunk, heads })
    }

    fn step_stats(&self, cache: &StepCache, step: &StepIdx) -> PassStats {
        let mut stats = PassStats::default();
        for b in 0..step.batch() {
            if step.next[0][b].is_none() {
                continue;
            }
            stats.positions += 1;
            for k in 0..3 {
                let target = step.next[k][b].expect("aligned targets");
                let row = cache.heads[k].probs.row(b);
                let row = row.as_slice().expect("contiguous row");
                stats.ce[k] += nn::cross_entropy(row, target).expect("target within head");
                if nn::argmax(row) == target {
                    stats.correct[k] += 1;
                }
            }
        }
        stats
    }

    fn advance(state: &mut HiddenState, cache: &StepCache) {
        for (s, layers) in cache.stacks.iter().enumerate() {
            for (l, c) in layers.iter().enumerate() {
                state.layers[s][l].assign(&c.h);
            }
        }
    }

    /// Teacher-forced forward pass over a window, updating `state` in place.
    pub fn forward_window(&self, state: &mut HiddenState, window: &WindowBatch) -> Result<PassStats, ModelError> {
        let mut stats = PassStats::default();
        for step in &window.steps {
            let cache = self.step_forward(&self.params, state, step)?;
            stats.add(&self.step_stats(&cache, step));
            Self::advance(state, &cache);
        }
        Ok(stats)
    }

    /// Forward and truncated backward pass over one window. Gradients of the
    /// mean per-position loss are accumulated into `grads`; `state` is
    /// carried forward but receives no gradient from later windows.
    pub fn train_window(
        &self,
        params: &[f64],
        state: &mut HiddenState,
        window: &WindowBatch,
        grads: &mut [f64],
    ) -> Result<PassStats, ModelError> {
        let mut caches = Vec::with_capacity(window.len());
        let mut stats = PassStats::default();
        for step in &window.steps {
            let cache = self.step_forward(params, state, step)?;
            stats.add(&self.step_stats(&cache, step));
            Self::advance(state, &cache);
            caches.push(cache);
        }
        if stats.positions == 0 {
            return Ok(stats);
        }
        let scale = 1.0 / (3.0 * stats.positions as f64);

        let mut carry: Vec<Vec<Array2<f64>>> = self
            .stacks
            .iter()
            .map(|s| s.layers.iter().map(|l| Array2::zeros((window.steps[0].batch(), l.hidden))).collect())
            .collect();
        for (step, cache) in window.steps.iter().zip(&caches).rev() {
            let mut dh = std::mem::take(&mut carry);
            let mut dtrunk: Vec<Option<Array2<f64>>> = vec![None, None, None];
            for k in 0..3 {
                let head = &self.heads[k];
                let hc = &cache.heads[k];
                let mut dlogits = hc.probs.clone();
                for (b, mut row) in dlogits.rows_mut().into_iter().enumerate() {
                    match step.next[k][b] {
                        Some(t) => {
                            row[t] -= 1.0;
                            row *= scale;
                        }
                        None => row.fill(0.0),
                    }
                }
                let mut dhidden = head
                    .out
                    .backward(params, grads, &[Input::Dense(hc.hidden.view())], &dlogits.view())
                    .remove(0)
                    .expect("dense input");
                ndarray::Zip::from(&mut dhidden).and(&hc.hidden).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                let inputs = self.head_inputs(k, step, &cache.stacks, &[], &cache.trunk);
                let dins = head.hidden.backward(params, grads, &inputs, &dhidden.view());
                for (src, d) in head.inputs.iter().zip(dins) {
                    match (*src, d) {
                        (Src::Layer(s, l), Some(d)) => dh[s][l] += &d,
                        (Src::Trunk, Some(d)) => dtrunk[k] = Some(d),
                        _ => {}
                    }
                }
            }
            if let Some(trunk) = &self.trunk {
                for (k, d) in dtrunk.into_iter().enumerate() {
                    let Some(mut d) = d else { continue };
                    for l in (0..trunk.layers.len()).rev() {
                        let act = &cache.trunk[k][l];
                        ndarray::Zip::from(&mut d).and(act).for_each(|d, &a| {
                            if a <= 0.0 {
                                *d = 0.0;
                            }
                        });
                        if l == 0 {
                            let inputs = self.trunk_inputs(trunk, step, k);
                            trunk.layers[0].backward(params, grads, &inputs, &d.view());
                            break;
                        }
                        let below = [Input::Dense(cache.trunk[k][l - 1].view())];
                        d = trunk.layers[l].backward(params, grads, &below, &d.view()).remove(0).expect("dense input");
                    }
                }
            }
            for (s, stack) in self.stacks.iter().enumerate() {
                let mut layer_carry = Vec::with_capacity(stack.layers.len());
                for l in (0..stack.layers.len()).rev() {
                    let layer = &stack.layers[l];
                    let c = &cache.stacks[s][l];
                    let (dprev, dins) = if l == 0 {
                        let inputs = self.stack_inputs(stack, step);
                        layer.backward(params, grads, &inputs, c, dh[s][0].view())
                    } else {
                        let inputs = [Input::Dense(cache.stacks[s][l - 1].h.view())];
                        layer.backward(params, grads, &inputs, c, dh[s][l].view())
                    };
                    if l > 0 {
                        let d = dins.into_iter().next().flatten().expect("dense input");
                        dh[s][l - 1] += &d;
                    }
                    layer_carry.push(dprev);
                }
                layer_carry.reverse();
                carry.push(layer_carry);
            }
        }
        Ok(stats)
    }

    /// Mean per-position loss of a window for given parameters, starting from
    /// `state` (left untouched).
    pub fn window_loss(&self, params: &[f64], state: &HiddenState, window: &WindowBatch) -> Result<f64, ModelError> {
        let mut st = state.clone();
        let mut stats = PassStats::default();
        for step in &window.steps {
            let cache = self.step_forward(params, &st, step)?;
            stats.add(&self.step_stats(&cache, step));
            Self::advance(&mut st, &cache);
        }
        Ok(stats.total_ce() / (3.0 * stats.positions.max(1) as f64))
    }

    /// Steps `start..start + len` of a group of encoded songs, one song per
    /// batch slot. Step `i` feeds position `i` and targets position `i + 1`;
    /// slots whose song is exhausted are padded.
    pub fn window(&self, songs: &[&EncodedScore], start: usize, len: usize) -> WindowBatch {
        let lags = self.trunk.as_ref().map_or(1, |_| self.arch.context);
        let batch = songs.len();
        let steps = (start..start + len)
            .map(|i| {
                let mut step = StepIdx {
                    hist: vec![Default::default(); lags],
                    next: Default::default(),
                    none: vec![None; batch],
                };
                for song in songs {
                    let live = i + 1 < song.len();
                    for (k, seq) in [&song.dt, &song.t, &song.p].into_iter().enumerate() {
                        for (lag, h) in step.hist.iter_mut().enumerate() {
                            h[k].push(if live && i >= lag { Some(seq[i - lag]) } else { None });
                        }
                        step.next[k].push(if live { Some(seq[i + 1]) } else { None });
                    }
                }
                step
            })
            .collect();
        WindowBatch { steps }
    }

    /// Splits a group of songs into consecutive windows of at most
    /// `trunc_len` steps covering every predicted position.
    pub fn windows(&self, songs: &[&EncodedScore], trunc_len: usize) -> Vec<WindowBatch> {
        let positions = songs.iter().map(|s| s.len().saturating_sub(1)).max().unwrap_or(0);
        (0..positions)
            .step_by(trunc_len.max(1))
            .map(|start| self.window(songs, start, trunc_len.min(positions - start)))
            .collect()
    }

    /// Teacher-forced statistics for a set of songs, evaluated `batch` songs
    /// at a time; totals are reduced in song order.
    pub fn evaluate(&self, songs: &[EncodedScore], batch: usize) -> Result<PassStats, ModelError> {
        let mut total = PassStats::default();
        for group in songs.chunks(batch.max(1)) {
            let refs: Vec<&EncodedScore> = group.iter().collect();
            let mut state = self.zero_state(refs.len());
            let positions = refs.iter().map(|s| s.len().saturating_sub(1)).max().unwrap_or(0);
            let window = self.window(&refs, 0, positions);
            total.add(&self.forward_window(&mut state, &window)?);
        }
        Ok(total)
    }

    fn check_note(&self, note: [usize; 3]) -> Result<(), ModelError> {
        for (k, f) in Feature::ALL.into_iter().enumerate() {
            let len = self.dicts.size(f);
            if note[k] >= len {
                return Err(NnError::IndexOutOfRange { index: note[k], len }.into());
            }
        }
        Ok(())
    }

    fn single_step(&self, state: &NoteState, known: &[usize]) -> StepIdx {
        let lags = self.trunk.as_ref().map_or(1, |_| self.arch.context);
        let mut step = StepIdx { hist: vec![Default::default(); lags], next: Default::default(), none: vec![None] };
        for (lag, h) in step.hist.iter_mut().enumerate() {
            let note = state.history.get(lag);
            for k in 0..3 {
                h[k].push(note.map(|n| n[k]));
            }
        }
        for k in 0..3 {
            step.next[k].push(known.get(k).copied());
        }
        step
    }
}

/// State of one song for note-by-note evaluation and sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct NoteState {
    pub hidden: HiddenState,
    /// Most recent note first.
    history: VecDeque<[usize; 3]>,
}

impl NoteState {
    pub fn last_note(&self) -> Option<[usize; 3]> {
        self.history.front().copied()
    }
}

/// Note-level interface shared by trained models and test doubles.
pub trait NoteModel {
    type State: Clone;

    fn dictionaries(&self) -> &Dictionaries;

    fn initial_state(&self) -> Self::State;

    /// Consumes note `n` (indices `(dT, T, P)`).
    fn forward_note(&self, state: &mut Self::State, note: [usize; 3]) -> Result<(), ModelError>;

    /// Logits for the next unknown feature of note `n + 1`, given the
    /// already-chosen features (`[]`, `[dT]` or `[dT, T]`).
    fn head_logits(&self, state: &Self::State, known: &[usize]) -> Result<Vec<f64>, ModelError>;

    fn head_probs(&self, state: &Self::State, known: &[usize]) -> Result<Vec<f64>, ModelError> {
        Ok(nn::softmax(&self.head_logits(state, known)?, 1.0)?)
    }
}

impl NoteModel for Model {
    type State = NoteState;

    fn dictionaries(&self) -> &Dictionaries {
        &self.dicts
    }

    fn initial_state(&self) -> NoteState {
        NoteState { hidden: self.zero_state(1), history: VecDeque::new() }
    }

    fn forward_note(&self, state: &mut NoteState, note: [usize; 3]) -> Result<(), ModelError> {
        self.check_note(note)?;
        // deferred stacks step with the previous note and this note's features
        if state.last_note().is_some() {
            let step = self.single_step(state, &note);
            for (s, stack) in self.stacks.iter().enumerate().filter(|(_, s)| s.deferred) {
                let caches = self.stack_forward(&self.params, stack, &state.hidden.layers[s], &step)?;
                for (l, c) in caches.into_iter().enumerate() {
                    state.hidden.layers[s][l] = c.h;
                }
            }
        }
        state.history.push_front(note);
        state.history.truncate(self.arch.context);
        let step = self.single_step(state, &[]);
        for (s, stack) in self.stacks.iter().enumerate().filter(|(_, s)| !s.deferred) {
            let caches = self.stack_forward(&self.params, stack, &state.hidden.layers[s], &step)?;
            for (l, c) in caches.into_iter().enumerate() {
                state.hidden.layers[s][l] = c.h;
            }
        }
        Ok(())
    }

    fn head_logits(&self, state: &NoteState, known: &[usize]) -> Result<Vec<f64>, ModelError> {
        if known.len() > 2 {
            return Err(ModelError::InvalidConfig("at most dT and T can be known".into()));
        }
        for (k, &i) in known.iter().enumerate() {
            let len = self.dicts.size(Feature::ALL[k]);
            if i >= len {
                return Err(NnError::IndexOutOfRange { index: i, len }.into());
            }
        }
        if state.last_note().is_none() {
            return Err(ModelError::InvalidConfig("no note has been fed yet".into()));
        }
        let k = known.len();
        let step = self.single_step(state, known);
        // tentative step for deferred stacks feeding this head
        let mut layers = state.hidden.layers.clone();
        for (s, stack) in self.stacks.iter().enumerate().filter(|(_, s)| s.deferred) {
            let reads = self.heads[k].inputs.iter().any(|src| matches!(src, Src::Layer(t, _) if *t == s));
            if !reads {
                continue;
            }
            let needs = stack.inputs.iter().filter(|s| matches!(s, Src::Next(_))).count();
            if needs > k {
                return Err(ModelError::InvalidConfig(format!("stack {s} needs {needs} known features")));
            }
            let caches = self.stack_forward(&self.params, stack, &state.hidden.layers[s], &step)?;
            layers[s] = caches.into_iter().map(|c| c.h).collect();
        }
        let trunk = match &self.trunk {
            Some(tr) => (0..3).map(|j| self.trunk_forward(&self.params, tr, &step, j)).collect::<Result<Vec<_>, _>>()?,
            None => Vec::new(),
        };
        let inputs = self.head_inputs(k, &step, &[], &layers, &trunk);
        let hc = self.head_forward(&self.params, k, &inputs)?;
        Ok(hc.probs.into_raw_vec_and_offset().0)
    }
}
