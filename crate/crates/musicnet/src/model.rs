//! The correlation-weighted time-attention network: a shared encoder that
//! attends from reference points to observed timestamps per channel and
//! mixes channels through the correlation matrix, a decoder that attends
//! back from target times (no channel mixing), and a GRU that summarizes a
//! latent sequence into a fixed-width vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::substream;
use crate::spectral::CorrelationMatrix;
use crate::tensor::{NodeId, ParamStore, Tape};

fn default_heads() -> usize {
    4
}
fn default_d_r() -> usize {
    16
}
fn default_d_model() -> usize {
    256
}
fn default_gru_hidden() -> usize {
    50
}

/// Architecture dimensions. One encoder/decoder parameter set serves every
/// scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_heads")]
    pub num_heads: usize,
    #[serde(default = "default_d_r")]
    pub d_r: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_gru_hidden")]
    pub gru_hidden: usize,
    #[serde(default)]
    pub num_channels: usize,
    /// 0 disables the classifier head.
    #[serde(default)]
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            num_heads: default_heads(),
            d_r: default_d_r(),
            d_model: default_d_model(),
            gru_hidden: default_gru_hidden(),
            num_channels: 0,
            num_classes: 0,
        }
    }
}

/// Store indices of one time embedding's parameters.
#[derive(Clone, Debug)]
pub struct TimeEmbedIds {
    pub lin_w: usize,
    pub lin_b: usize,
    pub per_w: usize,
    pub per_b: usize,
}

#[derive(Clone, Debug)]
pub struct GruIds {
    pub wz: usize,
    pub uz: usize,
    pub bz: usize,
    pub wr: usize,
    pub ur: usize,
    pub br: usize,
    pub wh: usize,
    pub uh: usize,
    pub bh: usize,
}

/// Store indices for every named parameter, fixed at registration.
#[derive(Clone, Debug)]
pub struct ParamIds {
    pub enc_te: TimeEmbedIds,
    pub enc_wq: Vec<usize>,
    pub enc_wk: Vec<usize>,
    pub enc_out_w: usize,
    pub enc_out_b: usize,
    pub dec_te: TimeEmbedIds,
    pub dec_wq: Vec<usize>,
    pub dec_wk: Vec<usize>,
    pub dec_mix_w: usize,
    pub dec_mix_b: usize,
    pub dec_read_w: usize,
    pub dec_read_b: usize,
    pub gru: GruIds,
    pub cls: Option<(usize, usize)>,
}

/// All learnable state plus the dimension record.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub ids: ParamIds,
}

fn add_uniform(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    shape: Vec<usize>,
    fan_in: usize,
) -> usize {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    store.add(name, shape, data)
}

fn add_time_embed(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    num_heads: usize,
    d_r: usize,
) -> TimeEmbedIds {
    // The linear term's slope starts in (0, 1) so a linear time trend is
    // representable immediately; everything else uses the fan-in rule
    // (scalar input, so bound 1).
    let lin_w_data: Vec<f64> = (0..num_heads).map(|_| rng.gen_range(0.0..1.0)).collect();
    let lin_w = store.add(&format!("{prefix}.lin_w"), vec![num_heads, 1], lin_w_data);
    let lin_b = add_uniform(store, rng, &format!("{prefix}.lin_b"), vec![num_heads, 1], 1);
    let per_w = add_uniform(store, rng, &format!("{prefix}.per_w"), vec![num_heads, d_r - 1], 1);
    let per_b = add_uniform(store, rng, &format!("{prefix}.per_b"), vec![num_heads, d_r - 1], 1);
    TimeEmbedIds { lin_w, lin_b, per_w, per_b }
}

impl ModelParams {
    /// Fresh parameters drawn from the seed's init substream. Registration
    /// order is fixed, so a seed fully determines every array.
    pub fn init(config: ModelConfig, seed: u64) -> ModelParams {
        assert!(config.num_heads >= 1, "need at least one attention head");
        assert!(config.d_r >= 2, "time embedding width must be at least 2");
        assert!(config.num_channels >= 1, "model needs at least one channel");
        let mut rng = substream(seed, "init");
        let mut store = ParamStore::new();
        let (h, d_r, dm, d) = (config.num_heads, config.d_r, config.d_model, config.num_channels);

        let enc_te = add_time_embed(&mut store, &mut rng, "enc.te", h, d_r);
        let enc_wq = (0..h)
            .map(|i| add_uniform(&mut store, &mut rng, &format!("enc.wq.{i}"), vec![d_r, d_r], d_r))
            .collect();
        let enc_wk = (0..h)
            .map(|i| add_uniform(&mut store, &mut rng, &format!("enc.wk.{i}"), vec![d_r, d_r], d_r))
            .collect();
        let enc_out_w = add_uniform(&mut store, &mut rng, "enc.out_w", vec![h * d, dm], h * d);
        let enc_out_b = add_uniform(&mut store, &mut rng, "enc.out_b", vec![1, dm], h * d);

        let dec_te = add_time_embed(&mut store, &mut rng, "dec.te", h, d_r);
        let dec_wq = (0..h)
            .map(|i| add_uniform(&mut store, &mut rng, &format!("dec.wq.{i}"), vec![d_r, d_r], d_r))
            .collect();
        let dec_wk = (0..h)
            .map(|i| add_uniform(&mut store, &mut rng, &format!("dec.wk.{i}"), vec![d_r, d_r], d_r))
            .collect();
        let dec_mix_w = add_uniform(&mut store, &mut rng, "dec.mix_w", vec![h * dm, dm], h * dm);
        let dec_mix_b = add_uniform(&mut store, &mut rng, "dec.mix_b", vec![1, dm], h * dm);
        let dec_read_w = add_uniform(&mut store, &mut rng, "dec.read_w", vec![dm, d], dm);
        let dec_read_b = add_uniform(&mut store, &mut rng, "dec.read_b", vec![1, d], dm);

        let hid = config.gru_hidden;
        let gru = GruIds {
            wz: add_uniform(&mut store, &mut rng, "gru.wz", vec![dm, hid], dm),
            uz: add_uniform(&mut store, &mut rng, "gru.uz", vec![hid, hid], hid),
            bz: add_uniform(&mut store, &mut rng, "gru.bz", vec![1, hid], hid),
            wr: add_uniform(&mut store, &mut rng, "gru.wr", vec![dm, hid], dm),
            ur: add_uniform(&mut store, &mut rng, "gru.ur", vec![hid, hid], hid),
            br: add_uniform(&mut store, &mut rng, "gru.br", vec![1, hid], hid),
            wh: add_uniform(&mut store, &mut rng, "gru.wh", vec![dm, hid], dm),
            uh: add_uniform(&mut store, &mut rng, "gru.uh", vec![hid, hid], hid),
            bh: add_uniform(&mut store, &mut rng, "gru.bh", vec![1, hid], hid),
        };

        let cls = if config.num_classes >= 2 {
            let w = add_uniform(&mut store, &mut rng, "cls.w", vec![hid, config.num_classes], hid);
            let b = add_uniform(&mut store, &mut rng, "cls.b", vec![1, config.num_classes], hid);
            Some((w, b))
        } else {
            None
        };

        ModelParams { config, store, ids: ParamIds { enc_te, enc_wq, enc_wk, enc_out_w, enc_out_b, dec_te, dec_wq, dec_wk, dec_mix_w, dec_mix_b, dec_read_w, dec_read_b, gru, cls } }
    }

    /// Bind every parameter onto the tape; the result indexes by store order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.store.bind(tape)
    }
}

/// Per-head time embedding of `times`: dimension 0 is the linear term
/// `w_0 t + b_0`, dimensions 1.. are `sin(w_i t + b_i)`. Returns one
/// `[|times|, d_r]` node per head.
pub fn time_embed(
    tape: &mut Tape,
    times: &[f64],
    te: &TimeEmbedIds,
    bound: &[NodeId],
    num_heads: usize,
) -> Vec<NodeId> {
    let n = times.len();
    let t = tape.constant(vec![n, 1], times.to_vec());
    (0..num_heads)
        .map(|h| {
            let lw = tape.row(bound[te.lin_w], h);
            let lb = tape.row(bound[te.lin_b], h);
            let lin = tape.matmul(t, lw);
            let lin = tape.add_row(lin, lb);
            let pw = tape.row(bound[te.per_w], h);
            let pb = tape.row(bound[te.per_b], h);
            let per = tape.matmul(t, pw);
            let per = tape.add_row(per, pb);
            let per = tape.sin(per);
            tape.concat_cols(&[lin, per])
        })
        .collect()
}

/// Constant node holding the transposed correlation weights, the fixed
/// mixing matrix applied after per-channel attention. The raw (symmetric,
/// unit-diagonal) weights are used as-is: any row rescaling would let a
/// channel lean harder on itself as its cross-channel weights shrink, which
/// breaks the re-weighting ordering.
pub fn mixing_constant(tape: &mut Tape, c: &CorrelationMatrix) -> NodeId {
    let d = c.num_channels;
    let mut t = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            t[j * d + i] = c.weights[i * d + j];
        }
    }
    tape.constant(vec![d, d], t)
}

/// Correlation-weighted time attention. Per head: dot-product scores between
/// embedded queries and keys scaled by 1/d_r, per-channel softmax restricted
/// to that channel's visible keys, attention-weighted values, then channel
/// mixing by the transposed correlation weights. Heads concatenate into a
/// linear projection.
///
/// `x_cols[d]` is the `[T, 1]` value column for channel d, or `None` to skip
/// a channel with no visible observations (its output column is zero).
#[allow(clippy::too_many_arguments)]
pub fn corr_attention(
    tape: &mut Tape,
    q_embeds: &[NodeId],
    k_embeds: &[NodeId],
    x_cols: &[Option<NodeId>],
    visible_cols: &[Vec<bool>],
    c_hat_t: NodeId,
    wq: &[NodeId],
    wk: &[NodeId],
    out_w: NodeId,
    out_b: NodeId,
    d_r: usize,
) -> NodeId {
    let num_heads = q_embeds.len();
    let d = x_cols.len();
    let k_rows = tape.shape(q_embeds[0])[0];
    let t_rows = tape.shape(k_embeds[0])[0];
    let mut head_outs = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let q = tape.matmul(q_embeds[h], wq[h]);
        let k = tape.matmul(k_embeds[h], wk[h]);
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scores = tape.scale(scores, 1.0 / d_r as f64);
        let mut cols = Vec::with_capacity(d);
        for (ch, x_col) in x_cols.iter().enumerate() {
            match x_col {
                Some(xc) => {
                    let vis = &visible_cols[ch];
                    assert_eq!(vis.len(), t_rows, "visibility column length mismatch");
                    let mut mask = Vec::with_capacity(k_rows * t_rows);
                    for _ in 0..k_rows {
                        mask.extend_from_slice(vis);
                    }
                    let a = tape.masked_softmax(scores, &mask);
                    cols.push(tape.matmul(a, *xc));
                }
                None => cols.push(tape.constant(vec![k_rows, 1], vec![0.0; k_rows])),
            }
        }
        let y = tape.concat_cols(&cols);
        let z = tape.matmul(y, c_hat_t);
        head_outs.push(z);
    }
    let concat = tape.concat_cols(&head_outs);
    let proj = tape.matmul(concat, out_w);
    tape.add_row(proj, out_b)
}

/// Encoder pass for one scale: embed reference points (queries) and grid
/// times (keys) with the shared encoder embedding, expose only `visible`
/// cells to attention, and return the latent sequence `[|tau|, d_model]`.
#[allow(clippy::too_many_arguments)]
pub fn encode(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &[NodeId],
    c_hat_t: NodeId,
    grid: &[f64],
    values: &[f64],
    visible: &[bool],
    tau: &[f64],
) -> NodeId {
    let cfg = &params.config;
    let d = cfg.num_channels;
    let t_len = grid.len();
    assert_eq!(values.len(), t_len * d, "value buffer does not match grid x channels");
    assert_eq!(visible.len(), t_len * d, "visibility buffer does not match grid x channels");
    let ids = &params.ids;
    let q_embeds = time_embed(tape, tau, &ids.enc_te, bound, cfg.num_heads);
    let k_embeds = time_embed(tape, grid, &ids.enc_te, bound, cfg.num_heads);
    let mut x_cols = Vec::with_capacity(d);
    let mut visible_cols = Vec::with_capacity(d);
    for ch in 0..d {
        let vis: Vec<bool> = (0..t_len).map(|t| visible[t * d + ch]).collect();
        if vis.iter().any(|&v| v) {
            let col: Vec<f64> = (0..t_len).map(|t| values[t * d + ch]).collect();
            x_cols.push(Some(tape.constant(vec![t_len, 1], col)));
        } else {
            x_cols.push(None);
        }
        visible_cols.push(vis);
    }
    let wq: Vec<NodeId> = ids.enc_wq.iter().map(|&i| bound[i]).collect();
    let wk: Vec<NodeId> = ids.enc_wk.iter().map(|&i| bound[i]).collect();
    corr_attention(
        tape,
        &q_embeds,
        &k_embeds,
        &x_cols,
        &visible_cols,
        c_hat_t,
        &wq,
        &wk,
        bound[ids.enc_out_w],
        bound[ids.enc_out_b],
        cfg.d_r,
    )
}

/// Decoder pass: attend from `target_times` (queries) back to the latent
/// positions `tau` (keys) with the decoder's own embedding, mix heads, and
/// read out per-channel reconstructions `[|target_times|, D]`. Attention
/// weights depend only on times, so the output is linear in `r` up to
/// biases; there is no correlation mixing.
pub fn decode(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &[NodeId],
    r: NodeId,
    tau: &[f64],
    target_times: &[f64],
) -> NodeId {
    let cfg = &params.config;
    let ids = &params.ids;
    let q_embeds = time_embed(tape, target_times, &ids.dec_te, bound, cfg.num_heads);
    let k_embeds = time_embed(tape, tau, &ids.dec_te, bound, cfg.num_heads);
    let t_rows = target_times.len();
    let k_rows = tau.len();
    let all_visible = vec![true; t_rows * k_rows];
    let mut head_outs = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let q = tape.matmul(q_embeds[h], bound[ids.dec_wq[h]]);
        let k = tape.matmul(k_embeds[h], bound[ids.dec_wk[h]]);
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt);
        let scores = tape.scale(scores, 1.0 / cfg.d_r as f64);
        let a = tape.masked_softmax(scores, &all_visible);
        head_outs.push(tape.matmul(a, r));
    }
    let concat = tape.concat_cols(&head_outs);
    let mixed = tape.matmul(concat, bound[ids.dec_mix_w]);
    let mixed = tape.add_row(mixed, bound[ids.dec_mix_b]);
    let out = tape.matmul(mixed, bound[ids.dec_read_w]);
    tape.add_row(out, bound[ids.dec_read_b])
}

/// Standard GRU over the latent sequence rows in time order; returns the
/// final hidden state `[1, gru_hidden]`. Update convention:
/// `h' = (1 - z) * h + z * h_cand`.
pub fn gru_summarize(tape: &mut Tape, params: &ModelParams, bound: &[NodeId], r: NodeId) -> NodeId {
    let g = &params.ids.gru;
    let hid = params.config.gru_hidden;
    let steps = tape.shape(r)[0];
    assert!(steps >= 1, "gru_summarize: empty latent sequence");
    let mut h = tape.constant(vec![1, hid], vec![0.0; hid]);
    for step in 0..steps {
        let x = tape.row(r, step);
        let xz = tape.matmul(x, bound[g.wz]);
        let hz = tape.matmul(h, bound[g.uz]);
        let zsum = tape.add(xz, hz);
        let zsum = tape.add_row(zsum, bound[g.bz]);
        let z = tape.sigmoid(zsum);

        let xr = tape.matmul(x, bound[g.wr]);
        let hr = tape.matmul(h, bound[g.ur]);
        let rsum = tape.add(xr, hr);
        let rsum = tape.add_row(rsum, bound[g.br]);
        let rg = tape.sigmoid(rsum);

        let gated = tape.mul(rg, h);
        let hh = tape.matmul(gated, bound[g.uh]);
        let xh = tape.matmul(x, bound[g.wh]);
        let csum = tape.add(xh, hh);
        let csum = tape.add_row(csum, bound[g.bh]);
        let cand = tape.tanh(csum);

        let keep = tape.affine(z, -1.0, 1.0);
        let kept = tape.mul(keep, h);
        let new = tape.mul(z, cand);
        h = tape.add(kept, new);
    }
    h
}

/// Linear classifier head over a batch of summary vectors `[B, gru_hidden]`.
pub fn classify_logits(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &[NodeId],
    h_batch: NodeId,
) -> NodeId {
    let (w, b) = params.ids.cls.expect("classifier head not configured (num_classes < 2)");
    let logits = tape.matmul(h_batch, bound[w]);
    tape.add_row(logits, bound[b])
}
