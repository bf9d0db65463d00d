//! The encoder-decoder network with attention and copying.
//!
//! A two-layer bidirectional LSTM encoder produces a memory matrix M of
//! concatenated forward/backward states, one row per source token. A
//! single-layer LSTM decoder consumes `[embedding(y_{t−1}); c_t]` at each
//! step, where the context c_t comes from dot-product attention between
//! the previous decoder state (projected to memory width) and the rows
//! of M. Two scores compete for the next token: a generation score over
//! V ∪ L from `W_o·[s_t; c_t]`, and a copy score per source position
//! from `tanh(h_jᵀ·W_c)·s_t`. One softmax over the concatenated scores
//! yields the mixed distribution; the probability of a token type sums
//! its generation mass and the copy mass of every source position
//! holding that type.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// d_s = d_h; memory rows are 2·hidden_dim wide.
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub dropout: f64,
    /// Disabled for the attention-only ablation.
    pub use_copy: bool,
    /// Attend with the state produced this step instead of s_{t−1}.
    /// Off by default; the written equations use the previous state.
    pub attend_current_state: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 100,
            hidden_dim: 512,
            encoder_layers: 2,
            dropout: 0.4,
            use_copy: true,
            attend_current_state: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.encoder_layers == 0 {
            return Err(crate::Error::Config(
                "model dimensions must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(crate::Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Dropout handling for one forward pass. Training mode owns a
/// per-instance RNG so parallel instances stay deterministic.
pub enum RunMode {
    Eval,
    Train { rng: ChaCha8Rng },
}

impl RunMode {
    pub fn train(seed: u64) -> Self {
        use rand::SeedableRng;
        RunMode::Train {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Encoder output: the memory matrix plus everything per-instance the
/// decoder needs alongside it.
pub struct EncoderMemory {
    /// `[T_x × 2·hidden]`, one row per source token.
    pub m: Var,
    /// `tanh(M·W_c)`, `[T_x × hidden]`; present when copying is enabled.
    pub copy_proj: Option<Var>,
    pub source_ids: Vec<usize>,
}

pub struct AttentionResult {
    /// `α_{t,·}`: `[1 × T_x]`, nonnegative, sums to one.
    pub weights: Var,
    /// `c_t = Σ_j α_{t,j} h_j`: `[1 × 2·hidden]`.
    pub context: Var,
    /// Raw dot-product scores `e_{t,·}`: `[1 × T_x]`.
    pub scores: Var,
}

pub struct DecoderState {
    pub h: Var,
    pub cell: Var,
    pub prev_token: usize,
    /// Previous context, used by the current-state attention variant.
    pub ctx: Var,
}

/// The mixed generate/copy distribution for one decoder step.
pub struct MixedDistribution {
    /// `[1 × (|V|+|L|+T_x)]` with copying, `[1 × (|V|+|L|)]` without.
    pub probs: Var,
    pub gen_len: usize,
    pub copy_len: usize,
}

struct LstmParams {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("v_size", &self.v_size)
            .field("l_size", &self.l_size)
            .finish_non_exhaustive()
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub v_size: usize,
    pub l_size: usize,
    store: ParamStore,
    embed: ParamId,
    encoder: Vec<[LstmParams; 2]>,
    dec_w_emb: ParamId,
    dec_w_ctx: ParamId,
    dec_w_hh: ParamId,
    dec_bias: ParamId,
    attn_w: ParamId,
    out_w: ParamId,
    copy_w: ParamId,
}

fn uniform(rng: &mut impl Rng, n: usize, k: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-k..k)).collect()
}

impl Model {
    /// Build a model with fresh parameters. `embed_table` is the
    /// initialized V ∪ L embedding matrix (see `vocab::init_embeddings`);
    /// the remaining weights draw from U(−1/√fan_in, 1/√fan_in) with zero
    /// biases except the forget gate at one.
    pub fn new(
        config: ModelConfig,
        v_size: usize,
        l_size: usize,
        embed_table: Vec<f64>,
        seed: u64,
    ) -> Model {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_dim;
        let e = config.embed_dim;
        let mut store = ParamStore::new();

        let embed = store.add("embed", v_size + l_size, e, embed_table);

        let mut encoder = Vec::new();
        for layer in 0..config.encoder_layers {
            let input = if layer == 0 { e } else { 2 * h };
            let mut dirs = Vec::new();
            for dir in ["fwd", "bwd"] {
                let prefix = format!("enc.l{layer}.{dir}");
                let k_ih = 1.0 / (input as f64).sqrt();
                let k_hh = 1.0 / (h as f64).sqrt();
                let w_ih = store.add(
                    &format!("{prefix}.w_ih"),
                    input,
                    4 * h,
                    uniform(&mut rng, input * 4 * h, k_ih),
                );
                let w_hh = store.add(
                    &format!("{prefix}.w_hh"),
                    h,
                    4 * h,
                    uniform(&mut rng, h * 4 * h, k_hh),
                );
                let mut b = vec![0.0; 4 * h];
                b[h..2 * h].iter_mut().for_each(|x| *x = 1.0);
                let bias = store.add(&format!("{prefix}.bias"), 1, 4 * h, b);
                dirs.push(LstmParams { w_ih, w_hh, bias });
            }
            let [fwd, bwd]: [LstmParams; 2] = dirs.try_into().ok().expect("two directions");
            encoder.push([fwd, bwd]);
        }

        let k_e = 1.0 / (e as f64).sqrt();
        let k_h = 1.0 / (h as f64).sqrt();
        let k_2h = 1.0 / ((2 * h) as f64).sqrt();
        let dec_w_emb = store.add("dec.w_emb", e, 4 * h, uniform(&mut rng, e * 4 * h, k_e));
        let dec_w_ctx = store.add(
            "dec.w_ctx",
            2 * h,
            4 * h,
            uniform(&mut rng, 2 * h * 4 * h, k_2h),
        );
        let dec_w_hh = store.add("dec.w_hh", h, 4 * h, uniform(&mut rng, h * 4 * h, k_h));
        let mut b = vec![0.0; 4 * h];
        b[h..2 * h].iter_mut().for_each(|x| *x = 1.0);
        let dec_bias = store.add("dec.bias", 1, 4 * h, b);

        let attn_w = store.add("attn.w", h, 2 * h, uniform(&mut rng, h * 2 * h, k_h));
        let out_w = store.add(
            "out.w",
            3 * h,
            v_size + l_size,
            uniform(&mut rng, 3 * h * (v_size + l_size), 1.0 / ((3 * h) as f64).sqrt()),
        );
        let copy_w = store.add("copy.w", 2 * h, h, uniform(&mut rng, 2 * h * h, k_2h));

        Model {
            config,
            v_size,
            l_size,
            store,
            embed,
            encoder,
            dec_w_emb,
            dec_w_ctx,
            dec_w_hh,
            dec_bias,
            attn_w,
            out_w,
            copy_w,
        }
    }

    /// Rebuild a model around parameter values loaded from a checkpoint.
    pub fn from_parts(
        config: ModelConfig,
        v_size: usize,
        l_size: usize,
        mut values: impl FnMut(&str) -> Vec<f64>,
    ) -> Model {
        let embed = values("embed");
        let mut model = Model::new(config, v_size, l_size, embed, 0);
        let names: Vec<String> = model
            .store
            .iter()
            .map(|(_, p)| p.name.clone())
            .collect();
        for name in names.into_iter().skip(1) {
            let id = model.store.id(&name);
            let data = values(&name);
            assert_eq!(
                data.len(),
                model.store.get(id).len(),
                "checkpoint parameter {name} has wrong size"
            );
            *model.store.values_mut(id) = data;
        }
        model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn gen_len(&self) -> usize {
        self.v_size + self.l_size
    }

    fn dropout(&self, tape: &Tape, x: Var, mode: &mut RunMode) -> Var {
        let rate = self.config.dropout;
        match mode {
            RunMode::Train { rng } if rate > 0.0 => {
                let (rows, cols) = tape.shape(x);
                let keep = 1.0 - rate;
                let mask: Vec<f64> = (0..rows * cols)
                    .map(|_| {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let m = tape.constant(rows, cols, mask);
                tape.mul(x, m)
            }
            _ => x,
        }
    }

    fn lstm_step(
        &self,
        tape: &Tape,
        gates_in: Var,
        h: Var,
        cell: Var,
        w_hh: Var,
        bias: Var,
    ) -> (Var, Var) {
        let hd = self.config.hidden_dim;
        let gates = tape.add_bias(tape.add(gates_in, tape.matmul(h, w_hh)), bias);
        let i = tape.sigmoid(tape.slice_cols(gates, 0, hd));
        let f = tape.sigmoid(tape.slice_cols(gates, hd, hd));
        let g = tape.tanh(tape.slice_cols(gates, 2 * hd, hd));
        let o = tape.sigmoid(tape.slice_cols(gates, 3 * hd, hd));
        let cell_new = tape.add(tape.mul(f, cell), tape.mul(i, g));
        let h_new = tape.mul(o, tape.tanh(cell_new));
        (h_new, cell_new)
    }

    /// One LSTM direction over a whole layer input `[T × in]`. The input
    /// transform is hoisted into a single matmul; only the recurrent part
    /// runs per token. Returns the per-token hidden states.
    fn run_direction(
        &self,
        tape: &Tape,
        xs: Var,
        len: usize,
        params: &LstmParams,
        reverse: bool,
    ) -> Vec<Var> {
        let h = self.config.hidden_dim;
        let w_ih = tape.param(&self.store, params.w_ih);
        let w_hh = tape.param(&self.store, params.w_hh);
        let bias = tape.param(&self.store, params.bias);
        let xw = tape.matmul(xs, w_ih);
        let mut state_h = tape.constant(1, h, vec![0.0; h]);
        let mut state_c = tape.constant(1, h, vec![0.0; h]);
        let mut out = vec![None; len];
        let order: Vec<usize> = if reverse {
            (0..len).rev().collect()
        } else {
            (0..len).collect()
        };
        for t in order {
            let gates_in = tape.gather_rows(xw, &[t]);
            let (nh, nc) = self.lstm_step(tape, gates_in, state_h, state_c, w_hh, bias);
            state_h = nh;
            state_c = nc;
            out[t] = Some(state_h);
        }
        out.into_iter().map(|v| v.expect("filled")).collect()
    }

    /// Encode a source id sequence into the memory matrix. Bidirectional:
    /// every row depends on the whole sentence.
    pub fn encode(&self, tape: &Tape, source_ids: &[usize], mode: &mut RunMode) -> EncoderMemory {
        assert!(!source_ids.is_empty(), "encode: empty source sequence");
        let embed = tape.param(&self.store, self.embed);
        let mut layer_in = tape.gather_rows(embed, source_ids);
        layer_in = self.dropout(tape, layer_in, mode);

        let len = source_ids.len();
        let mut m = layer_in;
        for (li, dirs) in self.encoder.iter().enumerate() {
            let fwd = self.run_direction(tape, m, len, &dirs[0], false);
            let bwd = self.run_direction(tape, m, len, &dirs[1], true);
            let rows: Vec<Var> = (0..len)
                .map(|t| tape.concat_cols(&[fwd[t], bwd[t]]))
                .collect();
            m = tape.stack_rows(&rows);
            if li + 1 < self.encoder.len() {
                m = self.dropout(tape, m, mode);
            }
        }
        m = self.dropout(tape, m, mode);

        let copy_proj = if self.config.use_copy {
            let w_c = tape.param(&self.store, self.copy_w);
            Some(tape.tanh(tape.matmul(m, w_c)))
        } else {
            None
        };

        EncoderMemory {
            m,
            copy_proj,
            source_ids: source_ids.to_vec(),
        }
    }

    /// Fresh decoder state: zero vectors, primed on BOS.
    pub fn initial_state(&self, tape: &Tape, bos_id: usize) -> DecoderState {
        let h = self.config.hidden_dim;
        DecoderState {
            h: tape.constant(1, h, vec![0.0; h]),
            cell: tape.constant(1, h, vec![0.0; h]),
            prev_token: bos_id,
            ctx: tape.constant(1, 2 * h, vec![0.0; 2 * h]),
        }
    }

    /// Dot-product attention between a decoder state and the memory. The
    /// state is projected to memory width first; `α = softmax(e)` and
    /// `c = Σ_j α_j h_j`.
    pub fn attend(&self, tape: &Tape, state: Var, memory: &EncoderMemory) -> AttentionResult {
        let w = tape.param(&self.store, self.attn_w);
        let proj = tape.matmul(state, w);
        let scores = tape.matmul_nt(proj, memory.m);
        let weights = tape.softmax(scores);
        let context = tape.matmul(weights, memory.m);
        AttentionResult {
            weights,
            context,
            scores,
        }
    }

    /// Generation scores `ψ_g = W_o·[s_t; c_t]` over V ∪ L.
    pub fn generate_scores(&self, tape: &Tape, state: Var, context: Var) -> Var {
        let w = tape.param(&self.store, self.out_w);
        let sc = tape.concat_cols(&[state, context]);
        tape.matmul(sc, w)
    }

    /// Copy scores `ψ_c(x_j) = tanh(h_jᵀ·W_c)·s_t`, one per source position.
    pub fn copy_scores(&self, tape: &Tape, memory: &EncoderMemory, state: Var) -> Var {
        let proj = memory
            .copy_proj
            .expect("copy scoring requested on a memory encoded without copy_proj");
        tape.matmul_nt(state, proj)
    }

    /// One softmax over generation and copy scores together, giving the
    /// mixed distribution whose normalizer Z is shared by the two modes.
    pub fn mixed_softmax(&self, tape: &Tape, gen_scores: Var, copy_scores: Option<Var>) -> MixedDistribution {
        let gen_len = self.gen_len();
        match copy_scores {
            Some(cs) => {
                let (_, copy_len) = tape.shape(cs);
                let all = tape.concat_cols(&[gen_scores, cs]);
                MixedDistribution {
                    probs: tape.softmax(all),
                    gen_len,
                    copy_len,
                }
            }
            None => MixedDistribution {
                probs: tape.softmax(gen_scores),
                gen_len,
                copy_len: 0,
            },
        }
    }

    /// The flat event indices whose probabilities sum to p(y_t = token):
    /// the generation slot, plus every source position holding the token
    /// when copying is enabled.
    pub fn token_events(&self, token_id: usize, source_ids: &[usize]) -> Vec<usize> {
        let mut events = vec![token_id];
        if self.config.use_copy {
            for (j, &sid) in source_ids.iter().enumerate() {
                if sid == token_id {
                    events.push(self.gen_len() + j);
                }
            }
        }
        events
    }

    /// One decoder step: attention, LSTM update, mixed distribution.
    pub fn decode_step(
        &self,
        tape: &Tape,
        state: &DecoderState,
        memory: &EncoderMemory,
        mode: &mut RunMode,
    ) -> (MixedDistribution, DecoderState) {
        let embed = tape.param(&self.store, self.embed);
        let w_emb = tape.param(&self.store, self.dec_w_emb);
        let w_ctx = tape.param(&self.store, self.dec_w_ctx);
        let w_hh = tape.param(&self.store, self.dec_w_hh);
        let bias = tape.param(&self.store, self.dec_bias);

        let mut x = tape.gather_rows(embed, &[state.prev_token]);
        x = self.dropout(tape, x, mode);
        let xw = tape.matmul(x, w_emb);

        let (context, new_h, new_cell);
        if self.config.attend_current_state {
            // Input-feed the previous context, then attend with the
            // freshly computed state.
            let gates_in = tape.add(xw, tape.matmul(state.ctx, w_ctx));
            let (nh, nc) = self.lstm_step(tape, gates_in, state.h, state.cell, w_hh, bias);
            let att = self.attend(tape, nh, memory);
            context = att.context;
            new_h = nh;
            new_cell = nc;
        } else {
            // Eq. 1 subscripts: score with s_{t−1}, then feed c_t in.
            let att = self.attend(tape, state.h, memory);
            let gates_in = tape.add(xw, tape.matmul(att.context, w_ctx));
            let (nh, nc) = self.lstm_step(tape, gates_in, state.h, state.cell, w_hh, bias);
            context = att.context;
            new_h = nh;
            new_cell = nc;
        }

        let scored_state = self.dropout(tape, new_h, mode);
        let gen = self.generate_scores(tape, scored_state, context);
        let copy = if self.config.use_copy {
            Some(self.copy_scores(tape, memory, scored_state))
        } else {
            None
        };
        let dist = self.mixed_softmax(tape, gen, copy);

        (
            dist,
            DecoderState {
                h: new_h,
                cell: new_cell,
                prev_token: state.prev_token,
                ctx: context,
            },
        )
    }

    /// Teacher-forced mean negative log-likelihood of `target ∪ {EOS}`.
    /// p(y_t) sums generation and copy mass for the gold token.
    pub fn sequence_loss(
        &self,
        tape: &Tape,
        source_ids: &[usize],
        target_ids: &[usize],
        bos_id: usize,
        eos_id: usize,
        mode: &mut RunMode,
    ) -> Var {
        let memory = self.encode(tape, source_ids, mode);
        let mut state = self.initial_state(tape, bos_id);
        let mut log_terms = Vec::with_capacity(target_ids.len() + 1);
        let steps: Vec<usize> = target_ids.iter().copied().chain([eos_id]).collect();
        for &gold in &steps {
            let (dist, mut next) = self.decode_step(tape, &state, &memory, mode);
            let events = self.token_events(gold, source_ids);
            let p = tape.gather_sum(dist.probs, &events);
            debug_assert!(tape.scalar(p) > 0.0, "softmax mass must be positive");
            log_terms.push(tape.ln(p));
            next.prev_token = gold;
            state = next;
        }
        let total = tape.add_n(&log_terms);
        tape.scale(total, -1.0 / steps.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    
    fn tiny_config(h: usize) -> ModelConfig {
        ModelConfig {
            embed_dim: 6,
            hidden_dim: h,
            encoder_layers: 2,
            dropout: 0.0,
            use_copy: true,
            attend_current_state: false,
        }
    }

    fn tiny_model(h: usize, v: usize, l: usize, seed: u64) -> Model {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7 + 1);
        let table = uniform(&mut rng, (v + l) * 6, 0.1);
        Model::new(tiny_config(h), v, l, table, seed)
    }

    #[test]
    fn encode_single_token_shapes() {
        let model = tiny_model(4, 10, 3, 1);
        let tape = Tape::new();
        let memory = model.encode(&tape, &[5], &mut RunMode::Eval);
        assert_eq!(tape.shape(memory.m), (1, 8));
        assert_eq!(tape.shape(memory.copy_proj.unwrap()), (1, 4));
    }

    #[test]
    #[should_panic(expected = "empty source")]
    fn encode_rejects_empty_input() {
        let model = tiny_model(4, 10, 3, 1);
        let tape = Tape::new();
        model.encode(&tape, &[], &mut RunMode::Eval);
    }

    #[test]
    fn reversed_input_with_swapped_directions_reverses_memory() {
        // One encoder layer: running the reversed sentence through a
        // model whose forward/backward weights are swapped must produce
        // the same memory with rows reversed and halves swapped.
        let mut config = tiny_config(4);
        config.encoder_layers = 1;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let table = uniform(&mut rng, 13 * 6, 0.1);
        let model = Model::new(config.clone(), 10, 3, table.clone(), 9);

        let mut swapped = Model::new(config, 10, 3, table, 9);
        for name in ["w_ih", "w_hh", "bias"] {
            let f = swapped.store.id(&format!("enc.l0.fwd.{name}"));
            let b = swapped.store.id(&format!("enc.l0.bwd.{name}"));
            let fv = swapped.store.get(f).data().to_vec();
            let bv = swapped.store.get(b).data().to_vec();
            *swapped.store.values_mut(f) = bv;
            *swapped.store.values_mut(b) = fv;
        }

        let ids = [3usize, 7, 1, 4];
        let rev: Vec<usize> = ids.iter().rev().copied().collect();

        let tape = Tape::new();
        let m = tape.value(model.encode(&tape, &ids, &mut RunMode::Eval).m);
        let tape2 = Tape::new();
        let m2 = tape2.value(swapped.encode(&tape2, &rev, &mut RunMode::Eval).m);

        let h = 4;
        for t in 0..ids.len() {
            let orig = &m[t * 2 * h..(t + 1) * 2 * h];
            let mirrored = &m2[(ids.len() - 1 - t) * 2 * h..(ids.len() - t) * 2 * h];
            for k in 0..h {
                assert!((orig[k] - mirrored[h + k]).abs() < 1e-12);
                assert!((orig[h + k] - mirrored[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_on_single_row_is_identity() {
        let model = tiny_model(4, 10, 3, 2);
        let tape = Tape::new();
        let memory = model.encode(&tape, &[2], &mut RunMode::Eval);
        let state = tape.constant(1, 4, vec![0.3, -0.2, 0.5, 0.1]);
        let att = model.attend(&tape, state, &memory);
        assert_eq!(tape.value(att.weights), vec![1.0]);
        assert_eq!(tape.value(att.context), tape.value(memory.m));
    }

    #[test]
    fn attention_over_identical_rows_is_uniform() {
        let model = tiny_model(4, 10, 3, 3);
        let tape = Tape::new();
        let row: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(&row);
        }
        let m = tape.constant(5, 8, data);
        let memory = EncoderMemory {
            m,
            copy_proj: None,
            source_ids: vec![0; 5],
        };
        let state = tape.constant(1, 4, vec![0.4, 0.0, -0.3, 0.2]);
        let att = model.attend(&tape, state, &memory);
        for w in tape.value(att.weights) {
            assert!((w - 0.2).abs() < 1e-12);
        }
        let sum: f64 = tape.value(att.weights).iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_output_weights_give_zero_generation_scores() {
        let mut model = tiny_model(4, 10, 3, 4);
        let id = model.store.id("out.w");
        model.store.values_mut(id).iter_mut().for_each(|v| *v = 0.0);
        let tape = Tape::new();
        let s = tape.constant(1, 4, vec![0.5; 4]);
        let c = tape.constant(1, 8, vec![-0.3; 8]);
        let scores = model.generate_scores(&tape, s, c);
        assert_eq!(tape.shape(scores), (1, 13));
        assert!(tape.value(scores).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generation_scores_are_linear_in_state_and_context() {
        let model = tiny_model(4, 10, 3, 5);
        let tape = Tape::new();
        let s = tape.constant(1, 4, vec![0.2, -0.4, 0.6, 0.1]);
        let c = tape.constant(1, 8, vec![0.3; 8]);
        let base = tape.value(model.generate_scores(&tape, s, c));
        let s2 = tape.scale(s, 2.5);
        let c2 = tape.scale(c, 2.5);
        let scaled = tape.value(model.generate_scores(&tape, s2, c2));
        for (b, sc) in base.iter().zip(&scaled) {
            assert!((sc - 2.5 * b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_copy_weights_give_zero_copy_scores() {
        let mut model = tiny_model(4, 10, 3, 6);
        let id = model.store.id("copy.w");
        model.store.values_mut(id).iter_mut().for_each(|v| *v = 0.0);
        let tape = Tape::new();
        let memory = model.encode(&tape, &[1, 2, 3], &mut RunMode::Eval);
        let s = tape.constant(1, 4, vec![0.7; 4]);
        let scores = model.copy_scores(&tape, &memory, s);
        assert_eq!(tape.shape(scores), (1, 3));
        assert!(tape.value(scores).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mixed_softmax_uniform_case() {
        // |V ∪ L| = 4 and T_x = 2 with all-zero scores: six events, each
        // with probability exactly 1/6.
        let model = tiny_model(4, 3, 1, 7);
        let tape = Tape::new();
        let gen = tape.constant(1, 4, vec![0.0; 4]);
        let copy = tape.constant(1, 2, vec![0.0; 2]);
        let dist = model.mixed_softmax(&tape, gen, Some(copy));
        let probs = tape.value(dist.probs);
        assert_eq!(probs.len(), 6);
        for p in probs {
            assert!((p - 1.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_source_word_sums_copy_mass() {
        let model = tiny_model(4, 10, 3, 8);
        let tape = Tape::new();
        let source = [5usize, 2, 5, 9];
        let gen = tape.constant(1, 13, (0..13).map(|i| 0.1 * i as f64).collect());
        let copy = tape.constant(1, 4, vec![0.4, -0.2, 0.9, 0.3]);
        let dist = model.mixed_softmax(&tape, gen, Some(copy));
        let probs = tape.value(dist.probs);

        let events = model.token_events(5, &source);
        assert_eq!(events, vec![5, 13, 15]);
        let p_word: f64 = events.iter().map(|&e| probs[e]).sum();
        let manual = probs[5] + probs[13] + probs[15];
        assert!((p_word - manual).abs() < 1e-15);
        assert!(p_word > probs[5]);

        let total: f64 = probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mixed_softmax_mass_is_one_over_random_draws() {
        use rand::SeedableRng;
        let model = tiny_model(4, 6, 2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..1000 {
            let tape = Tape::new();
            let gen = tape.constant(1, 8, (0..8).map(|_| rng.gen_range(-8.0..8.0)).collect());
            let copy = tape.constant(1, 5, (0..5).map(|_| rng.gen_range(-8.0..8.0)).collect());
            let dist = model.mixed_softmax(&tape, gen, Some(copy));
            let total: f64 = tape.value(dist.probs).iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_only_distribution_still_normalizes() {
        use rand::SeedableRng;
        let mut config = tiny_config(4);
        config.use_copy = false;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let table = uniform(&mut rng, 9 * 6, 0.1);
        let model = Model::new(config, 6, 3, table, 10);
        let tape = Tape::new();
        let memory = model.encode(&tape, &[1, 2], &mut RunMode::Eval);
        assert!(memory.copy_proj.is_none());
        let state = model.initial_state(&tape, 2);
        let (dist, _) = model.decode_step(&tape, &state, &memory, &mut RunMode::Eval);
        assert_eq!(dist.copy_len, 0);
        let probs = tape.value(dist.probs);
        assert_eq!(probs.len(), 9);
        let total: f64 = probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert_eq!(model.token_events(4, &[1, 2]), vec![4]);
    }

    #[test]
    fn decode_step_is_deterministic_in_eval_mode() {
        let model = tiny_model(4, 10, 3, 11);
        let run = || {
            let tape = Tape::new();
            let memory = model.encode(&tape, &[3, 1, 4], &mut RunMode::Eval);
            let state = model.initial_state(&tape, 2);
            let (dist, _) = model.decode_step(&tape, &state, &memory, &mut RunMode::Eval);
            tape.value(dist.probs)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn decode_step_shapes_cover_extended_vocabulary() {
        let model = tiny_model(4, 10, 3, 12);
        let tape = Tape::new();
        let memory = model.encode(&tape, &[3, 1, 4, 7], &mut RunMode::Eval);
        let state = model.initial_state(&tape, 2);
        let (dist, _) = model.decode_step(&tape, &state, &memory, &mut RunMode::Eval);
        assert_eq!(dist.gen_len, 13);
        assert_eq!(dist.copy_len, 4);
        assert_eq!(tape.shape(dist.probs), (1, 17));
    }

    #[test]
    fn attention_context_stays_in_convex_hull() {
        let model = tiny_model(4, 10, 3, 13);
        let tape = Tape::new();
        let memory = model.encode(&tape, &[5, 6, 7], &mut RunMode::Eval);
        let state = tape.constant(1, 4, vec![0.9, -0.8, 0.2, 0.4]);
        let att = model.attend(&tape, state, &memory);
        let w = tape.value(att.weights);
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // Convexity: context must lie between the column-wise min and max.
        let m = tape.value(memory.m);
        let c = tape.value(att.context);
        for col in 0..8 {
            let vals: Vec<f64> = (0..3).map(|r| m[r * 8 + col]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-12;
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-12;
            assert!(c[col] >= lo && c[col] <= hi);
        }
    }

    #[test]
    fn sequence_loss_matches_closed_form_at_zero_weights() {
        // Zeroed weights give the uniform mixed distribution at every
        // step, so the loss has a computable closed form: each step
        // contributes −log(|events(y_t)| / E).
        let mut model = tiny_model(4, 10, 3, 14);
        let names: Vec<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
        for name in names {
            let id = model.store.id(&name);
            model.store.values_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
        let source = [4usize, 5, 6, 5];
        let target = [4usize, 11, 5];
        let bos = 2;
        let eos = 3;

        let tape = Tape::new();
        let loss = model.sequence_loss(&tape, &source, &target, bos, eos, &mut RunMode::Eval);
        let got = tape.scalar(loss);

        let e = (13 + 4) as f64;
        let expected: f64 = -[
            2.0 / e, // token 4: generate + one copy position
            1.0 / e, // label 11: generate only
            3.0 / e, // token 5: generate + two copy positions
            1.0 / e, // EOS: generate only
        ]
        .iter()
        .map(|p| p.ln())
        .sum::<f64>()
            / 4.0;
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn teacher_forced_nll_matches_manual_step_products() {
        // Consistency: sequence_loss equals the mean of −log p over the
        // per-step distributions it is built from.
        let model = tiny_model(4, 10, 3, 15);
        let source = [4usize, 5, 6];
        let target = [4usize, 11, 5, 12];
        let (bos, eos) = (2, 3);

        let tape = Tape::new();
        let loss = tape.scalar(model.sequence_loss(&tape, &source, &target, bos, eos, &mut RunMode::Eval));

        let tape2 = Tape::new();
        let memory = model.encode(&tape2, &source, &mut RunMode::Eval);
        let mut state = model.initial_state(&tape2, bos);
        let mut acc = 0.0;
        let steps: Vec<usize> = target.iter().copied().chain([eos]).collect();
        for &gold in &steps {
            let (dist, mut next) = model.decode_step(&tape2, &state, &memory, &mut RunMode::Eval);
            let probs = tape2.value(dist.probs);
            let p: f64 = model
                .token_events(gold, &source)
                .iter()
                .map(|&e| probs[e])
                .sum();
            acc -= p.ln();
            next.prev_token = gold;
            state = next;
        }
        let manual = acc / steps.len() as f64;
        assert!((loss - manual).abs() < 1e-12);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let mut model = tiny_model(3, 8, 3, 16);
        let source = [4usize, 5, 6];
        let target = [4usize, 9, 5];
        let max_rel = crate::gradcheck::finite_diff_check_on(
            &mut model,
            |m| m.store_mut(),
            |tape, m| m.sequence_loss(tape, &source, &target, 2, 3, &mut RunMode::Eval),
        );
        assert!(max_rel < 1e-4, "max rel err {max_rel}");
    }

    #[test]
    fn current_state_attention_variant_gradients_check_out() {
        use rand::SeedableRng;
        let mut config = tiny_config(3);
        config.attend_current_state = true;
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let table = uniform(&mut rng, 11 * 6, 0.1);
        let mut model = Model::new(config, 8, 3, table, 17);
        let source = [4usize, 5];
        let target = [4usize, 9];
        let max_rel = crate::gradcheck::finite_diff_check_on(
            &mut model,
            |m| m.store_mut(),
            |tape, m| m.sequence_loss(tape, &source, &target, 2, 3, &mut RunMode::Eval),
        );
        assert!(max_rel < 1e-4, "max rel err {max_rel}");
    }
}
