//! 95-state HMM: ten 9-state left-to-right digit word models plus one
//! 5-state silence model, a digit-loop grammar, prior-scaled Viterbi
//! decoding, forced alignment, and Viterbi-training realignment.
//!
//! Decoding and alignment both run the same max-product dynamic program
//! over a [`DecodeGraph`]; the loop-grammar graph and the per-transcript
//! linear alignment graph share arc probabilities, so every constrained
//! path is also a decode path with the same score (the alignment score can
//! never beat the free decode).
//!
//! Junction probabilities: each state keeps a self-loop probability
//! (initially 0.6, re-estimated during Viterbi training); the remaining
//! mass moves forward within a word, and at a word-final state it is split
//! uniformly over the grammar options (after a digit: ten digits, silence,
//! or utterance end; after silence: ten digits or end; silence cannot
//! follow silence). Utterances start in silence or any digit, uniformly.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acoustic::{forward, AlignedUtterance, Mode, PosteriorBatch, Trainer};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::seed;

pub const NUM_DIGITS: usize = 10;
pub const STATES_PER_DIGIT: usize = 9;
pub const SILENCE_STATES: usize = 5;
pub const SILENCE_START: usize = NUM_DIGITS * STATES_PER_DIGIT;
pub const NUM_STATES: usize = SILENCE_START + SILENCE_STATES;

/// A word model in the topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Digit(u8),
    Silence,
}

impl Unit {
    pub fn entry_state(self) -> usize {
        match self {
            Unit::Digit(d) => d as usize * STATES_PER_DIGIT,
            Unit::Silence => SILENCE_START,
        }
    }

    pub fn final_state(self) -> usize {
        match self {
            Unit::Digit(d) => d as usize * STATES_PER_DIGIT + STATES_PER_DIGIT - 1,
            Unit::Silence => NUM_STATES - 1,
        }
    }

    pub fn num_states(self) -> usize {
        match self {
            Unit::Digit(_) => STATES_PER_DIGIT,
            Unit::Silence => SILENCE_STATES,
        }
    }
}

/// Which unit a state id belongs to.
pub fn unit_of(state: usize) -> Unit {
    debug_assert!(state < NUM_STATES);
    if state >= SILENCE_START {
        Unit::Silence
    } else {
        Unit::Digit((state / STATES_PER_DIGIT) as u8)
    }
}

pub fn is_entry_state(state: usize) -> bool {
    unit_of(state).entry_state() == state
}

pub fn is_final_state(state: usize) -> bool {
    unit_of(state).final_state() == state
}

/// Per-state self-loop probabilities; the grammar junction split is fixed
/// (uniform over options) and the within-word forward mass is `1 - self`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HmmTopology {
    pub self_loop: Vec<f64>,
}

impl Default for HmmTopology {
    fn default() -> Self {
        HmmTopology { self_loop: vec![0.6; NUM_STATES] }
    }
}

impl HmmTopology {
    pub fn validate(&self) -> Result<()> {
        if self.self_loop.len() != NUM_STATES {
            return Err(Error::InvalidConfig {
                detail: format!("topology has {} states, want {NUM_STATES}", self.self_loop.len()),
            });
        }
        for (s, &p) in self.self_loop.iter().enumerate() {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidConfig { detail: format!("state {s} self-loop {p} outside (0,1)") });
            }
        }
        Ok(())
    }
}

/// Laplace-smoothed log state priors for posterior-to-likelihood scaling.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StatePriors {
    pub log_prior: Vec<f64>,
}

impl StatePriors {
    pub fn uniform() -> Self {
        StatePriors { log_prior: vec![(1.0 / NUM_STATES as f64).ln(); NUM_STATES] }
    }
}

/// `prior(s) = (count(s) + 1) / (frames + NUM_STATES)`.
pub fn estimate_priors<A: AsRef<[usize]>>(alignments: &[A]) -> Result<StatePriors> {
    if alignments.is_empty() {
        return Err(Error::Empty { what: "alignment set".to_string() });
    }
    let mut counts = vec![0u64; NUM_STATES];
    let mut total = 0u64;
    for a in alignments {
        for &s in a.as_ref() {
            if s >= NUM_STATES {
                return Err(Error::StateOutOfRange { state: s, num_states: NUM_STATES });
            }
            counts[s] += 1;
            total += 1;
        }
    }
    let denom = (total + NUM_STATES as u64) as f64;
    let log_prior = counts.iter().map(|&c| ((c + 1) as f64 / denom).ln()).collect();
    Ok(StatePriors { log_prior })
}

/// Per-state self-loop vs. leave counts taken from alignments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransitionCounts {
    pub self_count: Vec<u64>,
    pub leave_count: Vec<u64>,
}

pub fn count_transitions<A: AsRef<[usize]>>(alignments: &[A]) -> TransitionCounts {
    let mut c = TransitionCounts {
        self_count: vec![0; NUM_STATES],
        leave_count: vec![0; NUM_STATES],
    };
    for a in alignments {
        for w in a.as_ref().windows(2) {
            if w[1] == w[0] {
                c.self_count[w[0]] += 1;
            } else {
                c.leave_count[w[0]] += 1;
            }
        }
        // The final frame implicitly leaves its state at utterance end.
        if let Some(&last) = a.as_ref().last() {
            c.leave_count[last] += 1;
        }
    }
    c
}

/// Laplace-smoothed self-loop re-estimation:
/// `p_self = (self + 1) / (self + leave + 2)`.
pub fn reestimate_self_loops(counts: &TransitionCounts) -> HmmTopology {
    let self_loop = counts
        .self_count
        .iter()
        .zip(&counts.leave_count)
        .map(|(&s, &l)| (s + 1) as f64 / (s + l + 2) as f64)
        .collect();
    HmmTopology { self_loop }
}

/// Decoding context: topology plus priors and the posterior-scaling flag.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct HmmSystem {
    pub topology: HmmTopology,
    pub priors: StatePriors,
    /// Scale emissions as `log p(s|x) - log p(s)` (standard hybrid
    /// practice); disable for raw-posterior ablation.
    pub scale_by_priors: bool,
}

impl Default for HmmSystem {
    fn default() -> Self {
        HmmSystem {
            topology: HmmTopology::default(),
            priors: StatePriors::uniform(),
            scale_by_priors: true,
        }
    }
}

/// A graph the Viterbi core can run on: log-prob arcs stored per
/// destination, initial and final log weights, an emission class per node,
/// and an optional word label on word-entry nodes.
#[derive(Debug, Clone)]
pub struct DecodeGraph {
    pub init: Vec<f64>,
    pub arcs_in: Vec<Vec<(u32, f64)>>,
    pub final_w: Vec<f64>,
    pub emit: Vec<u32>,
    pub word_entry: Vec<Option<u8>>,
}

impl DecodeGraph {
    pub fn num_nodes(&self) -> usize {
        self.emit.len()
    }
}

struct GraphBuilder {
    g: DecodeGraph,
}

impl GraphBuilder {
    fn new() -> Self {
        GraphBuilder {
            g: DecodeGraph {
                init: Vec::new(),
                arcs_in: Vec::new(),
                final_w: Vec::new(),
                emit: Vec::new(),
                word_entry: Vec::new(),
            },
        }
    }

    fn add_node(&mut self, emit: u32, word_entry: Option<u8>) -> u32 {
        self.g.init.push(f64::NEG_INFINITY);
        self.g.arcs_in.push(Vec::new());
        self.g.final_w.push(f64::NEG_INFINITY);
        self.g.emit.push(emit);
        self.g.word_entry.push(word_entry);
        (self.g.emit.len() - 1) as u32
    }

    fn add_arc(&mut self, src: u32, dst: u32, logp: f64) {
        self.g.arcs_in[dst as usize].push((src, logp));
    }

    /// Left-to-right chain for a unit; returns (entry, final) node ids.
    fn add_chain(&mut self, unit: Unit, topo: &HmmTopology, label: Option<u8>) -> (u32, u32) {
        let n = unit.num_states();
        let base = unit.entry_state();
        let mut first = 0;
        let mut prev = 0;
        for i in 0..n {
            let state = base + i;
            let node = self.add_node(state as u32, if i == 0 { label } else { None });
            self.add_arc(node, node, self.g_self(state, topo));
            if i == 0 {
                first = node;
            } else {
                self.add_arc(prev, node, self.g_forward(state - 1, topo));
            }
            prev = node;
        }
        (first, prev)
    }

    fn g_self(&self, state: usize, topo: &HmmTopology) -> f64 {
        topo.self_loop[state].ln()
    }

    fn g_forward(&self, state: usize, topo: &HmmTopology) -> f64 {
        (1.0 - topo.self_loop[state]).ln()
    }

    fn finish(self) -> DecodeGraph {
        self.g
    }
}

/// Grammar option counts at junctions: after a digit the options are the
/// ten digits, silence, and end; after silence the digits and end.
const DIGIT_EXIT_OPTIONS: f64 = (NUM_DIGITS + 2) as f64;
const SILENCE_EXIT_OPTIONS: f64 = (NUM_DIGITS + 1) as f64;
/// Utterance entry options: silence or any digit.
const ENTRY_OPTIONS: f64 = (NUM_DIGITS + 1) as f64;

/// Digit-loop grammar over all 95 states (node id == state id).
pub fn build_loop_graph(topo: &HmmTopology) -> DecodeGraph {
    let mut b = GraphBuilder::new();
    let mut digit_nodes = Vec::with_capacity(NUM_DIGITS);
    for d in 0..NUM_DIGITS as u8 {
        digit_nodes.push(b.add_chain(Unit::Digit(d), topo, Some(d)));
    }
    let (sil_entry, sil_final) = b.add_chain(Unit::Silence, topo, None);

    let entry_lp = (1.0 / ENTRY_OPTIONS).ln();
    for &(entry, _) in &digit_nodes {
        b.g.init[entry as usize] = entry_lp;
    }
    b.g.init[sil_entry as usize] = entry_lp;

    for d in 0..NUM_DIGITS {
        let (_, fin) = digit_nodes[d];
        let exit = b.g_forward(Unit::Digit(d as u8).final_state(), topo) - DIGIT_EXIT_OPTIONS.ln();
        for &(entry, _) in &digit_nodes {
            b.add_arc(fin, entry, exit);
        }
        b.add_arc(fin, sil_entry, exit);
        b.g.final_w[fin as usize] = exit;
    }
    let sil_exit = b.g_forward(Unit::Silence.final_state(), topo) - SILENCE_EXIT_OPTIONS.ln();
    for &(entry, _) in &digit_nodes {
        b.add_arc(sil_final, entry, sil_exit);
    }
    b.g.final_w[sil_final as usize] = sil_exit;

    b.finish()
}

/// Linear graph for a fixed transcript with optional silence before,
/// between, and after the words. Arc weights are identical to the loop
/// graph's, so this searches a subset of its paths.
pub fn build_align_graph(topo: &HmmTopology, transcript: &[u8]) -> Result<DecodeGraph> {
    if transcript.is_empty() {
        return Err(Error::Empty { what: "transcript".to_string() });
    }
    if let Some(&d) = transcript.iter().find(|&&d| d > 9) {
        return Err(Error::InvalidConfig { detail: format!("digit {d} outside 0..9") });
    }

    let mut b = GraphBuilder::new();
    let n = transcript.len();
    let silences: Vec<(u32, u32)> =
        (0..=n).map(|_| b.add_chain(Unit::Silence, topo, None)).collect();
    let words: Vec<(u32, u32)> =
        transcript.iter().map(|&d| b.add_chain(Unit::Digit(d), topo, Some(d))).collect();

    let entry_lp = (1.0 / ENTRY_OPTIONS).ln();
    b.g.init[silences[0].0 as usize] = entry_lp;
    b.g.init[words[0].0 as usize] = entry_lp;

    let sil_exit = b.g_forward(Unit::Silence.final_state(), topo) - SILENCE_EXIT_OPTIONS.ln();
    for i in 0..n {
        let digit_exit =
            b.g_forward(Unit::Digit(transcript[i]).final_state(), topo) - DIGIT_EXIT_OPTIONS.ln();
        // Silence i precedes word i.
        b.add_arc(silences[i].1, words[i].0, sil_exit);
        if i + 1 < n {
            // Word -> optional silence -> next word, or word -> word.
            b.add_arc(words[i].1, silences[i + 1].0, digit_exit);
            b.add_arc(words[i].1, words[i + 1].0, digit_exit);
        } else {
            // Last word: optional trailing silence, then end.
            b.add_arc(words[i].1, silences[n].0, digit_exit);
            b.g.final_w[words[i].1 as usize] = digit_exit;
        }
    }
    b.g.final_w[silences[n].1 as usize] = sil_exit;

    Ok(b.finish())
}

/// Max-product DP over a decode graph. Ties break toward the lower node
/// index (both for predecessors and for the final state), which makes the
/// returned path the unique backward-lexicographic minimum among
/// maximizing paths.
pub fn viterbi_path(graph: &DecodeGraph, log_emissions: &Array2<f64>) -> Result<(Vec<u32>, f64)> {
    let t_frames = log_emissions.nrows();
    let nodes = graph.num_nodes();
    if t_frames == 0 {
        return Err(Error::Empty { what: "emission matrix".to_string() });
    }

    let mut prev = vec![f64::NEG_INFINITY; nodes];
    let mut back = vec![vec![0u32; nodes]; t_frames];
    for s in 0..nodes {
        if graph.init[s] > f64::NEG_INFINITY {
            prev[s] = graph.init[s] + log_emissions[[0, graph.emit[s] as usize]];
        }
    }

    let mut cur = vec![f64::NEG_INFINITY; nodes];
    for t in 1..t_frames {
        for dst in 0..nodes {
            let mut best = f64::NEG_INFINITY;
            let mut best_src = 0u32;
            for &(src, w) in &graph.arcs_in[dst] {
                let cand = prev[src as usize] + w;
                if cand > best {
                    best = cand;
                    best_src = src;
                }
            }
            cur[dst] = if best > f64::NEG_INFINITY {
                best + log_emissions[[t, graph.emit[dst] as usize]]
            } else {
                f64::NEG_INFINITY
            };
            back[t][dst] = best_src;
        }
        std::mem::swap(&mut prev, &mut cur);
    }

    let mut best = f64::NEG_INFINITY;
    let mut best_node = usize::MAX;
    for s in 0..nodes {
        let cand = prev[s] + graph.final_w[s];
        if cand > best {
            best = cand;
            best_node = s;
        }
    }
    if best_node == usize::MAX || best == f64::NEG_INFINITY {
        return Err(Error::Other("no valid path through the decode graph".to_string()));
    }

    let mut path = vec![0u32; t_frames];
    path[t_frames - 1] = best_node as u32;
    for t in (1..t_frames).rev() {
        path[t - 1] = back[t][path[t] as usize];
    }
    Ok((path, best))
}

/// Arcs-in ordering note: [`viterbi_path`] scans `arcs_in[dst]` in push
/// order, so predecessor ties resolve to the earliest-added arc. Builders
/// add arcs in ascending source order, giving the lower-index preference.
fn emission_scores(posteriors: &PosteriorBatch, sys: &HmmSystem) -> Result<Array2<f64>> {
    posteriors.validate()?;
    if posteriors.probs.ncols() != NUM_STATES {
        return Err(Error::ShapeMismatch {
            detail: format!("{} posterior columns, want {NUM_STATES}", posteriors.probs.ncols()),
        });
    }
    let mut scores = posteriors.probs.mapv(f64::ln);
    if sys.scale_by_priors {
        for mut row in scores.rows_mut() {
            for (s, v) in row.iter_mut().enumerate() {
                *v -= sys.priors.log_prior[s];
            }
        }
    }
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub transcript: Vec<u8>,
    pub alignment: Vec<usize>,
    pub log_score: f64,
}

/// Free decoding over the digit-loop grammar.
pub fn viterbi_decode(posteriors: &PosteriorBatch, sys: &HmmSystem) -> Result<DecodeOutput> {
    sys.topology.validate()?;
    let emissions = emission_scores(posteriors, sys)?;
    let graph = build_loop_graph(&sys.topology);
    let (path, log_score) = viterbi_path(&graph, &emissions)?;
    let transcript = transcript_of_path(&graph, &path);
    let alignment = path.iter().map(|&n| graph.emit[n as usize] as usize).collect();
    Ok(DecodeOutput { transcript, alignment, log_score })
}

/// Best alignment of a fixed transcript (optional silences around words).
pub fn forced_align(
    posteriors: &PosteriorBatch,
    sys: &HmmSystem,
    transcript: &[u8],
) -> Result<(Vec<usize>, f64)> {
    sys.topology.validate()?;
    let min_frames = transcript.len() * STATES_PER_DIGIT;
    let frames = posteriors.probs.nrows();
    if frames < min_frames {
        return Err(Error::UtteranceTooShort { frames, min_frames });
    }
    let emissions = emission_scores(posteriors, sys)?;
    let graph = build_align_graph(&sys.topology, transcript)?;
    let (path, log_score) = viterbi_path(&graph, &emissions)?;
    let alignment = path.iter().map(|&n| graph.emit[n as usize] as usize).collect();
    Ok((alignment, log_score))
}

fn transcript_of_path(graph: &DecodeGraph, path: &[u32]) -> Vec<u8> {
    let mut words = Vec::new();
    for (t, &node) in path.iter().enumerate() {
        if t > 0 && path[t - 1] == node {
            continue;
        }
        if let Some(d) = graph.word_entry[node as usize] {
            words.push(d);
        }
    }
    words
}

/// Uniform flat-start alignment over the mandatory linear sequence
/// silence d1 silence ... dn silence; remainder frames go to the leading
/// states.
pub fn flat_start_alignment(num_frames: usize, transcript: &[u8]) -> Result<Vec<usize>> {
    if transcript.is_empty() {
        return Err(Error::Empty { what: "transcript".to_string() });
    }
    let mut states: Vec<usize> = Vec::new();
    for (i, &d) in transcript.iter().enumerate() {
        if d > 9 {
            return Err(Error::InvalidConfig { detail: format!("digit {d} outside 0..9") });
        }
        if i == 0 {
            states.extend(SILENCE_START..NUM_STATES);
        }
        let base = Unit::Digit(d).entry_state();
        states.extend(base..base + STATES_PER_DIGIT);
        states.extend(SILENCE_START..NUM_STATES);
    }
    if num_frames < states.len() {
        return Err(Error::UtteranceTooShort { frames: num_frames, min_frames: states.len() });
    }
    let base_len = num_frames / states.len();
    let remainder = num_frames % states.len();
    let mut alignment = Vec::with_capacity(num_frames);
    for (i, &s) in states.iter().enumerate() {
        let reps = base_len + usize::from(i < remainder);
        alignment.extend(std::iter::repeat(s).take(reps));
    }
    Ok(alignment)
}

/// Check the alignment invariants: legal topology transitions, entry at a
/// word or silence entry state, termination at a final state, silence
/// never followed directly by silence (so every word model is traversed
/// completely).
pub fn validate_alignment(alignment: &[usize]) -> Result<()> {
    if alignment.is_empty() {
        return Err(Error::Empty { what: "alignment".to_string() });
    }
    for &s in alignment {
        if s >= NUM_STATES {
            return Err(Error::StateOutOfRange { state: s, num_states: NUM_STATES });
        }
    }
    let illegal = |t: usize, p: usize, c: usize| {
        Err(Error::Other(format!("illegal transition {p} -> {c} at frame {t}")))
    };
    if !is_entry_state(alignment[0]) {
        return Err(Error::Other(format!("alignment starts mid-model at state {}", alignment[0])));
    }
    for t in 1..alignment.len() {
        let (p, c) = (alignment[t - 1], alignment[t]);
        if c == p {
            continue;
        }
        if c == p + 1 && unit_of(p) == unit_of(c) {
            continue;
        }
        if is_final_state(p) && is_entry_state(c) {
            // Silence cannot chain into silence.
            if unit_of(p) == Unit::Silence && unit_of(c) == Unit::Silence {
                return illegal(t, p, c);
            }
            continue;
        }
        return illegal(t, p, c);
    }
    let last = *alignment.last().unwrap();
    if !is_final_state(last) {
        return Err(Error::Other(format!("alignment ends mid-model at state {last}")));
    }
    Ok(())
}

/// Transcript implied by an alignment. A word starts exactly when a digit
/// entry state is reached by a non-self transition (entry states are only
/// re-occupied via self-loops within one word instance).
pub fn transcript_of_alignment(alignment: &[usize]) -> Vec<u8> {
    let mut words = Vec::new();
    for (t, &s) in alignment.iter().enumerate() {
        if t > 0 && alignment[t - 1] == s {
            continue;
        }
        if is_entry_state(s) {
            if let Unit::Digit(d) = unit_of(s) {
                words.push(d);
            }
        }
    }
    words
}

/// An utterance with features and reference transcript, before alignment.
#[derive(Debug, Clone)]
pub struct TranscribedUtterance {
    pub id: String,
    pub feats: FeatureMatrix,
    pub transcript: Vec<u8>,
}

#[derive(Debug)]
pub struct ViterbiEpochReport {
    pub aligned: Vec<AlignedUtterance>,
    pub total_log_score: f64,
    pub skipped: Vec<String>,
    pub train_loss: f64,
}

/// One Viterbi-training epoch: realign every utterance with the current
/// model (mean-mode posteriors), retrain one epoch on the new targets, and
/// re-estimate transition probabilities and priors from the alignments.
/// Alignment failures skip the utterance and are reported, never fatal.
pub fn viterbi_train_epoch(
    trainer: &mut Trainer,
    dataset: &[TranscribedUtterance],
    sys: &mut HmmSystem,
    align_seed: u64,
) -> Result<ViterbiEpochReport> {
    if dataset.is_empty() {
        return Err(Error::Empty { what: "dataset".to_string() });
    }

    let model = &trainer.model;
    let results: Vec<(usize, Result<(Vec<usize>, f64)>)> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, utt)| {
            let mode = Mode::Mean { seed: seed::derive_indexed(align_seed, "align-utt", i as u64) };
            let res = forward(model, &utt.feats, mode)
                .and_then(|post| forced_align(&post, sys, &utt.transcript));
            (i, res)
        })
        .collect();

    let mut aligned = Vec::with_capacity(dataset.len());
    let mut skipped = Vec::new();
    let mut total_log_score = 0.0;
    for (i, res) in results {
        match res {
            Ok((alignment, score)) => {
                total_log_score += score;
                aligned.push(AlignedUtterance {
                    id: dataset[i].id.clone(),
                    feats: dataset[i].feats.clone(),
                    alignment,
                });
            }
            Err(_) => skipped.push(dataset[i].id.clone()),
        }
    }
    if aligned.is_empty() {
        return Err(Error::Empty { what: "aligned dataset (all utterances skipped)".to_string() });
    }

    let train_loss = trainer.run_epoch(&aligned)?;

    let alignments: Vec<&[usize]> = aligned.iter().map(|u| u.alignment.as_slice()).collect();
    sys.topology = reestimate_self_loops(&count_transitions(&alignments));
    sys.priors = estimate_priors(&alignments)?;

    Ok(ViterbiEpochReport { aligned, total_log_score, skipped, train_loss })
}
