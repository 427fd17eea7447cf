//! Multi-stage mask decoder.
//!
//! Each stage runs a transformer block (click-to-scene cross-attention,
//! click-to-click self-attention, feed-forward; pre-norm residuals) and then
//! the conditioned query adaptor: mask head, prototype class head, mask
//! pooling into a spatial embedding, prototype lookup into a semantic
//! embedding, and a fusion MLP that yields the next stage's queries.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::encoder::{MultiScaleFeatures, QueryFeatures};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Pooling};
use crate::numerics::{
    attention_backward, attention_cached, fourier_pe, gemm, gemm_into, softmax_rows,
    softmax_rows_backward, AttentionCache, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache,
    ParamId, ParamStore, Tensor2, Trans,
};

#[derive(Debug, Clone)]
struct Stage {
    scene_proj: Option<Linear>,
    ln_cross: LayerNorm,
    cross_q: Linear,
    cross_k: Linear,
    cross_v: Linear,
    cross_o: Linear,
    ln_self: LayerNorm,
    self_q: Linear,
    self_k: Linear,
    self_v: Linear,
    self_o: Linear,
    ln_ffn: LayerNorm,
    ffn: Mlp,
}

/// Parameter layout of the decoder and its shared heads.
#[derive(Debug, Clone)]
pub struct Decoder {
    stages: Vec<Stage>,
    mask_head: Mlp,
    class_head: Mlp,
    adaptor: Mlp,
    pub prototypes: ParamId,
    num_classes: usize,
    query_dim: usize,
    pe_bands: usize,
    pooling: Pooling,
    spatial_embedding: bool,
    semantic_embedding: bool,
}

/// Per-stage predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    /// `M^i`, N×K mask logits.
    pub mask_logits: Tensor2,
    /// `Z^i`, N_c×K class logits.
    pub class_logits: Tensor2,
    /// Transformer-block output `Q_t^i`.
    pub query_t: Tensor2,
    /// Adapted queries `Q_a^i`.
    pub query_a: Tensor2,
    /// Spatial embedding `E_p^i` fed to the adaptor.
    pub spatial: Tensor2,
    /// Semantic embedding `E_s^i` fed to the adaptor.
    pub semantic: Tensor2,
    /// Prototype row chosen for each query.
    pub selected_prototype: Vec<usize>,
}

#[derive(Debug, Clone)]
struct StageCache {
    /// Projected scene tokens; `None` when the stage reads `scene_tokens`.
    scene: Option<Tensor2>,
    // cross-attention
    ln_cross: LayerNormCache,
    h_cross: Tensor2,
    q_cross: Tensor2,
    a_cross: Tensor2,
    p_cross: Tensor2,
    u_cross: Tensor2,
    y_cross: Tensor2,
    // self-attention
    ln_self: LayerNormCache,
    h_self: Tensor2,
    q_self: Tensor2,
    k_self: Tensor2,
    v_self: Tensor2,
    attn_self: AttentionCache,
    o_self: Tensor2,
    // ffn
    ln_ffn: LayerNormCache,
    ffn: MlpCache,
    // heads
    mask_vec: Tensor2,
    mask_cache: MlpCache,
    class_vec: Tensor2,
    class_cache: MlpCache,
    pool_weights: Tensor2,
    pool_sigmoid: Option<Tensor2>,
    adaptor_cache: MlpCache,
}

/// Intermediate values of [`Decoder::decode_cached`].
#[derive(Debug, Clone)]
pub struct DecoderCache {
    stages: Vec<StageCache>,
}

/// Gradients flowing out of the decoder into the encoder.
#[derive(Debug, Clone)]
pub struct DecoderInputGrads {
    pub queries: Tensor2,
    pub full: Tensor2,
    /// Indexed like `MultiScaleFeatures::scales`.
    pub scales: Vec<Option<Tensor2>>,
}

impl Decoder {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let d = cfg.query_dim;
        let l = cfg.stages();
        let stages = (0..l)
            .map(|s| {
                let name = |b: &str| format!("stage.{s}.{b}");
                let scene_proj = (s + 1 < l).then(|| {
                    let src = cfg.encoder_dims[l - 1 - s];
                    Linear::new(store, &name("scene_proj"), src, d, true, rng)
                });
                Stage {
                    scene_proj,
                    ln_cross: LayerNorm::new(store, &name("c2s.ln"), d),
                    cross_q: Linear::new(store, &name("c2s.wq"), d, d, true, rng),
                    cross_k: Linear::new(store, &name("c2s.wk"), d, d, false, rng),
                    cross_v: Linear::new(store, &name("c2s.wv"), d, d, true, rng),
                    cross_o: Linear::new(store, &name("c2s.wo"), d, d, true, rng),
                    ln_self: LayerNorm::new(store, &name("c2c.ln"), d),
                    self_q: Linear::new(store, &name("c2c.wq"), d, d, true, rng),
                    self_k: Linear::new(store, &name("c2c.wk"), d, d, false, rng),
                    self_v: Linear::new(store, &name("c2c.wv"), d, d, true, rng),
                    self_o: Linear::new(store, &name("c2c.wo"), d, d, true, rng),
                    ln_ffn: LayerNorm::new(store, &name("ffn.ln"), d),
                    ffn: Mlp::new(
                        store,
                        &name("ffn.mlp"),
                        &[d, cfg.ffn_hidden, d],
                        cfg.activation,
                        rng,
                    ),
                }
            })
            .collect();
        let h = cfg.head_hidden;
        let mask_head = Mlp::new(store, "mask_head", &[d, h, d], cfg.activation, rng);
        let class_head = Mlp::new(
            store,
            "class_head",
            &[d, h, cfg.prototype_dim],
            cfg.activation,
            rng,
        );
        let adaptor = Mlp::new(
            store,
            "adaptor",
            &[2 * d + cfg.prototype_dim, h, d],
            cfg.activation,
            rng,
        );
        let limit = (3.0 / cfg.prototype_dim as f64).sqrt();
        let dist = Uniform::new(-limit, limit);
        let protos = Tensor2::from_fn(cfg.num_prototypes, cfg.prototype_dim, |_, _| {
            dist.sample(rng)
        });
        let prototypes = store.add("prototypes", protos);
        Self {
            stages,
            mask_head,
            class_head,
            adaptor,
            prototypes,
            num_classes: cfg.num_classes,
            query_dim: d,
            pe_bands: cfg.pe_bands,
            pooling: cfg.pooling,
            spatial_embedding: cfg.spatial_embedding,
            semantic_embedding: cfg.semantic_embedding,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Runs every stage. Stage 1 reads the coarsest pooled scale, the last
    /// stage reads `F^L`.
    pub fn decode(
        &self,
        store: &ParamStore,
        feats: &MultiScaleFeatures,
        queries: &QueryFeatures,
    ) -> Result<Vec<StageOutput>> {
        self.decode_cached(store, feats, queries).map(|(o, _)| o)
    }

    pub fn decode_cached(
        &self,
        store: &ParamStore,
        feats: &MultiScaleFeatures,
        queries: &QueryFeatures,
    ) -> Result<(Vec<StageOutput>, DecoderCache)> {
        let l = self.stages.len();
        if feats.scales.len() != l {
            return Err(Error::Shape(format!(
                "decoder has {l} stages but the encoder produced {} scales",
                feats.scales.len()
            )));
        }
        if feats.full.cols() != self.query_dim || queries.queries.cols() != self.query_dim {
            return Err(Error::Shape(format!(
                "feature width {} / query width {} do not match decoder width {}",
                feats.full.cols(),
                queries.queries.cols(),
                self.query_dim
            )));
        }
        if queries.queries.rows() == 0 {
            return Err(Error::NoClicks);
        }
        let mut outputs = Vec::with_capacity(l);
        let mut caches = Vec::with_capacity(l);
        let mut q = queries.queries.clone();
        for s in 0..l {
            let scene = self.scene_input(store, feats, s)?;
            let (out, cache) = self.stage_forward(store, s, &q, scene, feats)?;
            q = out.query_a.clone();
            outputs.push(out);
            caches.push(cache);
        }
        Ok((outputs, DecoderCache { stages: caches }))
    }

    fn scene_input(
        &self,
        store: &ParamStore,
        feats: &MultiScaleFeatures,
        s: usize,
    ) -> Result<Option<Tensor2>> {
        let l = self.stages.len();
        match &self.stages[s].scene_proj {
            Some(proj) => {
                let scale = &feats.scales[l - 1 - s];
                let mut x = proj.forward(store, &scale.features);
                x.add_assign(&fourier_pe(
                    &scale.positions,
                    self.pe_bands,
                    self.query_dim,
                )?);
                Ok(Some(x))
            }
            None => Ok(None),
        }
    }

    fn stage_forward(
        &self,
        store: &ParamStore,
        s: usize,
        input: &Tensor2,
        projected: Option<Tensor2>,
        feats: &MultiScaleFeatures,
    ) -> Result<(StageOutput, StageCache)> {
        let st = &self.stages[s];
        let full = &feats.full;
        let scene = projected.as_ref().unwrap_or(&feats.scene_tokens);
        let scale = 1.0 / (self.query_dim as f64).sqrt();

        // click-to-scene: keys are never materialized, scores = (q Wkᵀ) Xᵀ
        let (h_cross, ln_cross) = st.ln_cross.forward_cached(store, input);
        let q_cross = st.cross_q.forward(store, &h_cross);
        let a_cross = gemm(&q_cross, Trans::N, store.get(st.cross_k.weight), Trans::T);
        let mut scores = Tensor2::zeros(input.rows(), scene.rows());
        gemm_into(scale, &a_cross, Trans::N, scene, Trans::T, 0.0, &mut scores);
        let p_cross = softmax_rows(&scores);
        let u_cross = gemm(&p_cross, Trans::N, scene, Trans::N);
        let y_cross = st.cross_v.forward(store, &u_cross);
        let mut q1 = st.cross_o.forward(store, &y_cross);
        q1.add_assign(input);

        // click-to-click
        let (h_self, ln_self) = st.ln_self.forward_cached(store, &q1);
        let q_self = st.self_q.forward(store, &h_self);
        let k_self = st.self_k.forward(store, &h_self);
        let v_self = st.self_v.forward(store, &h_self);
        let (o_self, attn_self) = attention_cached(&q_self, &k_self, &v_self)?;
        let mut q2 = st.self_o.forward(store, &o_self);
        q2.add_assign(&q1);

        // feed-forward
        let (h_ffn, ln_ffn) = st.ln_ffn.forward_cached(store, &q2);
        let (f, ffn) = st.ffn.forward_cached(store, &h_ffn);
        let query_t = f.add(&q2);

        // heads
        let (mask_vec, mask_cache) = self.mask_head.forward_cached(store, &query_t);
        let mask_logits = gemm(full, Trans::N, &mask_vec, Trans::T);
        let (class_vec, class_cache) = self.class_head.forward_cached(store, &query_t);
        let protos = self.class_prototypes(store);
        let class_logits = gemm(&protos, Trans::N, &class_vec, Trans::T);

        let k = input.rows();
        let (pool_weights, pool_sigmoid) = pooling_weights(&mask_logits, self.pooling);
        let spatial = if self.spatial_embedding {
            gemm(&pool_weights, Trans::T, full, Trans::N)
        } else {
            Tensor2::zeros(k, self.query_dim)
        };
        let selected_prototype = argmax_columns(&class_logits);
        let all_protos = store.get(self.prototypes);
        let semantic = if self.semantic_embedding {
            all_protos.select_rows(&selected_prototype)
        } else {
            Tensor2::zeros(k, all_protos.cols())
        };
        let cat = Tensor2::hcat(&[&query_t, &spatial, &semantic])?;
        let (query_a, adaptor_cache) = self.adaptor.forward_cached(store, &cat);

        let out = StageOutput {
            mask_logits,
            class_logits,
            query_t,
            query_a,
            spatial,
            semantic,
            selected_prototype,
        };
        let cache = StageCache {
            scene: projected,
            ln_cross,
            h_cross,
            q_cross,
            a_cross,
            p_cross,
            u_cross,
            y_cross,
            ln_self,
            h_self,
            q_self,
            k_self,
            v_self,
            attn_self,
            o_self,
            ln_ffn,
            ffn,
            mask_vec,
            mask_cache,
            class_vec,
            class_cache,
            pool_weights,
            pool_sigmoid,
            adaptor_cache,
        };
        Ok((out, cache))
    }

    fn class_prototypes(&self, store: &ParamStore) -> Tensor2 {
        let p = store.get(self.prototypes);
        Tensor2::from_fn(self.num_classes, p.cols(), |r, c| p.get(r, c))
    }

    /// Backward pass given loss gradients on each stage's mask and class
    /// logits. Gradients reach the prototypes through both the class head
    /// and the selected semantic embedding; the argmax selection and the
    /// hard pooling mask are treated as constants.
    pub fn backward(
        &self,
        store: &ParamStore,
        feats: &MultiScaleFeatures,
        outputs: &[StageOutput],
        cache: &DecoderCache,
        d_masks: &[Tensor2],
        d_classes: &[Tensor2],
        grads: &mut ParamStore,
    ) -> DecoderInputGrads {
        let l = self.stages.len();
        let mut d_full = Tensor2::zeros(feats.full.rows(), feats.full.cols());
        let mut d_scales: Vec<Option<Tensor2>> = vec![None; feats.scales.len()];
        let mut d_next: Option<Tensor2> = None;
        for s in (0..l).rev() {
            let d_input = self.stage_backward(
                store,
                s,
                &outputs[s],
                &cache.stages[s],
                &feats.full,
                &d_masks[s],
                &d_classes[s],
                d_next.as_ref(),
                &mut d_full,
                &mut d_scales,
                feats,
                grads,
            );
            d_next = Some(d_input);
        }
        DecoderInputGrads {
            queries: d_next.expect("at least one stage"),
            full: d_full,
            scales: d_scales,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn stage_backward(
        &self,
        store: &ParamStore,
        s: usize,
        out: &StageOutput,
        c: &StageCache,
        full: &Tensor2,
        d_mask: &Tensor2,
        d_class: &Tensor2,
        d_query_a: Option<&Tensor2>,
        d_full: &mut Tensor2,
        d_scales: &mut [Option<Tensor2>],
        feats: &MultiScaleFeatures,
        grads: &mut ParamStore,
    ) -> Tensor2 {
        let st = &self.stages[s];
        let d = self.query_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let mut d_qt = Tensor2::zeros(out.query_t.rows(), d);
        let mut d_m = d_mask.clone();

        if let Some(dqa) = d_query_a {
            let d_cat = self.adaptor.backward(store, &c.adaptor_cache, dqa, grads);
            let widths = [d, d, out.semantic.cols()];
            let parts = d_cat.hsplit(&widths);
            d_qt.add_assign(&parts[0]);
            if self.spatial_embedding {
                // E_p = Wᵀ F
                gemm_into(
                    1.0,
                    &c.pool_weights,
                    Trans::N,
                    &parts[1],
                    Trans::N,
                    1.0,
                    d_full,
                );
                if let Some(sig) = &c.pool_sigmoid {
                    let dw = gemm(full, Trans::N, &parts[1], Trans::T);
                    soft_pool_backward(&c.pool_weights, sig, &dw, &mut d_m);
                }
            }
            if self.semantic_embedding {
                let gp = grads.get_mut(self.prototypes);
                for (k, &row) in out.selected_prototype.iter().enumerate() {
                    for (g, v) in gp.row_mut(row).iter_mut().zip(parts[2].row(k)) {
                        *g += v;
                    }
                }
            }
        }

        // mask head: M = F mᵀ
        gemm_into(1.0, &d_m, Trans::N, &c.mask_vec, Trans::N, 1.0, d_full);
        let d_mvec = gemm(&d_m, Trans::T, full, Trans::N);
        d_qt.add_assign(
            &self
                .mask_head
                .backward(store, &c.mask_cache, &d_mvec, grads),
        );

        // class head: Z = P cᵀ
        let protos = self.class_prototypes(store);
        let d_protos = gemm(d_class, Trans::N, &c.class_vec, Trans::N);
        {
            let gp = grads.get_mut(self.prototypes);
            for r in 0..self.num_classes {
                for (g, v) in gp.row_mut(r).iter_mut().zip(d_protos.row(r)) {
                    *g += v;
                }
            }
        }
        let d_cvec = gemm(d_class, Trans::T, &protos, Trans::N);
        d_qt.add_assign(
            &self
                .class_head
                .backward(store, &c.class_cache, &d_cvec, grads),
        );

        // feed-forward
        let d_f = st.ffn.backward(store, &c.ffn, &d_qt, grads);
        let mut d_q2 = d_qt;
        d_q2.add_assign(&st.ln_ffn.backward(store, &c.ln_ffn, &d_f, grads));

        // click-to-click
        let d_o = st.self_o.backward(store, &c.o_self, &d_q2, grads);
        let (dq, dk, dv) = attention_backward(&c.q_self, &c.k_self, &c.v_self, &c.attn_self, &d_o);
        let mut d_h = st.self_q.backward(store, &c.h_self, &dq, grads);
        d_h.add_assign(&st.self_k.backward(store, &c.h_self, &dk, grads));
        d_h.add_assign(&st.self_v.backward(store, &c.h_self, &dv, grads));
        let mut d_q1 = d_q2;
        d_q1.add_assign(&st.ln_self.backward(store, &c.ln_self, &d_h, grads));

        // click-to-scene
        let d_y = st.cross_o.backward(store, &c.y_cross, &d_q1, grads);
        let d_u = st.cross_v.backward(store, &c.u_cross, &d_y, grads);
        let scene = c.scene.as_ref().unwrap_or(&feats.scene_tokens);
        let d_p = gemm(&d_u, Trans::N, scene, Trans::T);
        let mut d_scene = gemm(&c.p_cross, Trans::T, &d_u, Trans::N);
        let d_s = softmax_rows_backward(&c.p_cross, &d_p);
        let mut d_a = Tensor2::zeros(c.a_cross.rows(), c.a_cross.cols());
        gemm_into(scale, &d_s, Trans::N, scene, Trans::N, 0.0, &mut d_a);
        gemm_into(
            scale,
            &d_s,
            Trans::T,
            &c.a_cross,
            Trans::N,
            1.0,
            &mut d_scene,
        );
        // a = q Wkᵀ
        let d_qc = gemm(&d_a, Trans::N, store.get(st.cross_k.weight), Trans::N);
        gemm_into(
            1.0,
            &d_a,
            Trans::T,
            &c.q_cross,
            Trans::N,
            1.0,
            grads.get_mut(st.cross_k.weight),
        );
        let d_hc = st.cross_q.backward(store, &c.h_cross, &d_qc, grads);
        let mut d_input = d_q1;
        d_input.add_assign(&st.ln_cross.backward(store, &c.ln_cross, &d_hc, grads));

        match &st.scene_proj {
            Some(proj) => {
                let idx = self.stages.len() - 1 - s;
                let src = &feats.scales[idx].features;
                let d_src = proj.backward(store, src, &d_scene, grads);
                match &mut d_scales[idx] {
                    Some(acc) => acc.add_assign(&d_src),
                    slot => *slot = Some(d_src),
                }
            }
            None => d_full.add_assign(&d_scene),
        }
        d_input
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Column-normalized pooling weights (N×K) from mask logits.
fn pooling_weights(mask_logits: &Tensor2, pooling: Pooling) -> (Tensor2, Option<Tensor2>) {
    let (n, k) = mask_logits.shape();
    match pooling {
        Pooling::Hard => {
            let mut w = Tensor2::zeros(n, k);
            for col in 0..k {
                let count = (0..n).filter(|&j| mask_logits.get(j, col) > 0.0).count();
                if count == 0 {
                    continue;
                }
                let inv = 1.0 / count as f64;
                for j in 0..n {
                    if mask_logits.get(j, col) > 0.0 {
                        w.set(j, col, inv);
                    }
                }
            }
            (w, None)
        }
        Pooling::Soft => {
            let sig = mask_logits.map(sigmoid);
            let mut w = sig.clone();
            for col in 0..k {
                let total: f64 = (0..n).map(|j| sig.get(j, col)).sum();
                for j in 0..n {
                    w.set(j, col, sig.get(j, col) / total);
                }
            }
            (w, Some(sig))
        }
    }
}

fn soft_pool_backward(w: &Tensor2, sig: &Tensor2, dw: &Tensor2, d_m: &mut Tensor2) {
    let (n, k) = w.shape();
    for col in 0..k {
        let total: f64 = (0..n).map(|j| sig.get(j, col)).sum();
        let dot: f64 = (0..n).map(|j| dw.get(j, col) * w.get(j, col)).sum();
        for j in 0..n {
            let s = sig.get(j, col);
            let ds = (dw.get(j, col) - dot) / total;
            d_m.set(j, col, d_m.get(j, col) + ds * s * (1.0 - s));
        }
    }
}

/// Row index of the maximum in each column (ties → smaller row).
pub fn argmax_columns(t: &Tensor2) -> Vec<usize> {
    (0..t.cols())
        .map(|c| {
            let mut best = 0;
            for r in 1..t.rows() {
                if t.get(r, c) > t.get(best, c) {
                    best = r;
                }
            }
            best
        })
        .collect()
}

/// `M = F · φ_m(Q_t)ᵀ` as a free function over explicit tensors.
pub fn mask_head(
    store: &ParamStore,
    phi_m: &Mlp,
    full: &Tensor2,
    query_t: &Tensor2,
) -> Result<Tensor2> {
    if full.cols() != phi_m.out_dim(store) {
        return Err(Error::Shape("mask head width mismatch".into()));
    }
    let m = phi_m.forward(store, query_t);
    Ok(gemm(full, Trans::N, &m, Trans::T))
}

/// `Z = P_s[..N_c] · φ_c(Q_t)ᵀ`.
pub fn class_head(
    store: &ParamStore,
    phi_c: &Mlp,
    prototypes: &Tensor2,
    num_classes: usize,
    query_t: &Tensor2,
) -> Result<Tensor2> {
    if num_classes > prototypes.rows() {
        return Err(Error::InvalidInput(format!(
            "{num_classes} classes but only {} prototypes",
            prototypes.rows()
        )));
    }
    let c = phi_c.forward(store, query_t);
    if c.cols() != prototypes.cols() {
        return Err(Error::Shape("class head width mismatch".into()));
    }
    let p = Tensor2::from_fn(num_classes, prototypes.cols(), |r, col| {
        prototypes.get(r, col)
    });
    Ok(gemm(&p, Trans::N, &c, Trans::T))
}

/// Spatial and semantic embeddings and the adapted queries for explicit inputs.
pub fn query_adapt(
    store: &ParamStore,
    phi_q: &Mlp,
    query_t: &Tensor2,
    mask_logits: &Tensor2,
    class_logits: &Tensor2,
    full: &Tensor2,
    prototypes: &Tensor2,
    pooling: Pooling,
) -> Result<(Tensor2, Tensor2, Tensor2)> {
    let (w, _) = pooling_weights(mask_logits, pooling);
    let spatial = gemm(&w, Trans::T, full, Trans::N);
    let semantic = prototypes.select_rows(&argmax_columns(class_logits));
    let cat = Tensor2::hcat(&[query_t, &spatial, &semantic])?;
    Ok((phi_q.forward(store, &cat), spatial, semantic))
}

impl Decoder {
    pub fn mask_head_mlp(&self) -> &Mlp {
        &self.mask_head
    }

    pub fn class_head_mlp(&self) -> &Mlp {
        &self.class_head
    }

    pub fn adaptor_mlp(&self) -> &Mlp {
        &self.adaptor
    }

    /// Sets every attention output projection to zero.
    pub fn zero_attention_outputs(&self, store: &mut ParamStore) {
        for st in &self.stages {
            for lin in [st.cross_o, st.self_o] {
                store.get_mut(lin.weight).fill(0.0);
                if let Some(b) = lin.bias {
                    store.get_mut(b).fill(0.0);
                }
            }
        }
    }

    /// Runs only the transformer block of stage `s` (0-based) for tests.
    pub fn transformer_block(
        &self,
        store: &ParamStore,
        s: usize,
        queries: &Tensor2,
        scene_features: &Tensor2,
        scene_positions: &[[f64; 3]],
    ) -> Result<Tensor2> {
        let st = self
            .stages
            .get(s)
            .ok_or_else(|| Error::InvalidInput(format!("no stage {s}")))?;
        if queries.cols() != self.query_dim {
            return Err(Error::Shape("query width mismatch".into()));
        }
        let mut scene = match &st.scene_proj {
            Some(p) => {
                if scene_features.cols() != p.in_dim(store) {
                    return Err(Error::Shape("scene feature width mismatch".into()));
                }
                p.forward(store, scene_features)
            }
            None => {
                if scene_features.cols() != self.query_dim {
                    return Err(Error::Shape("scene feature width mismatch".into()));
                }
                scene_features.clone()
            }
        };
        scene.add_assign(&fourier_pe(scene_positions, self.pe_bands, self.query_dim)?);
        let placeholder = MultiScaleFeatures {
            scales: Vec::new(),
            full: Tensor2::zeros(1, self.query_dim),
            positions: Vec::new(),
            ancestors: Vec::new(),
            position_encoding: Tensor2::zeros(1, 1),
            scene_tokens: Tensor2::zeros(1, self.query_dim),
        };
        let (out, _) = self.stage_forward(store, s, queries, Some(scene), &placeholder)?;
        Ok(out.query_t)
    }
}
