use rand::Rng;
use vpr_numerics::{Graph, ParamStore, Tensor, Var};

use super::{Hierarchy, UpdateMode};
use crate::detection::{decide, CuWindow, Decision, DecisionMask, DetectorConfig};
use crate::distributions::{standard_normal, GaussianNode};
use crate::error::{Result, VprError};

/// Whether posterior states fed forward are sampled or taken at the mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Sample,
    Mean,
}

/// Criterion-U windows for every batch slot and level.
///
/// Windows belong to a slot rather than to an episode, so they keep their
/// statistics across consecutive training batches.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Detector {
    pub config: DetectorConfig,
    /// `[slot][level]`. In a hierarchy the first level never evaluates
    /// criteria, so its windows stay empty.
    windows: Vec<Vec<CuWindow>>,
}

impl Detector {
    pub fn new(config: DetectorConfig, slots: usize, levels: usize) -> Self {
        let windows = vec![vec![CuWindow::new(config.window); levels]; slots];
        Self { config, windows }
    }

    pub fn slots(&self) -> usize {
        self.windows.len()
    }

    pub fn window(&self, slot: usize, level: usize) -> &CuWindow {
        &self.windows[slot][level]
    }

    pub fn window_mut(&mut self, slot: usize, level: usize) -> &mut CuWindow {
        &mut self.windows[slot][level]
    }

    /// A detector for `rows` rows whose row `r` starts from slot `r mod slots`.
    pub fn for_rows(&self, rows: usize) -> Self {
        let windows = (0..rows)
            .map(|r| self.windows[r % self.windows.len().max(1)].clone())
            .collect();
        Self {
            config: self.config.clone(),
            windows,
        }
    }

    pub fn clear(&mut self) {
        self.windows.iter_mut().flatten().for_each(CuWindow::clear);
    }

    pub fn clear_slot(&mut self, slot: usize) {
        self.windows[slot].iter_mut().for_each(CuWindow::clear);
    }
}

/// How often the expensive sub-networks ran.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    /// Batched encoder calls producing each level's `x`.
    pub encoder_calls: Vec<usize>,
    /// Individual criterion evaluations (one per row and level).
    pub criteria_calls: usize,
    /// Rows for which a change prior was computed during detection.
    pub change_prior_rows: usize,
}

#[derive(Clone, Debug)]
struct LevelVars {
    x: Var,
    c: Var,
    d: Var,
    s: Var,
    post: GaussianNode,
    p_ch: GaussianNode,
    /// Temporal context the stored change prior was computed from.
    d_cand: Var,
    p_ch_valid: Vec<bool>,
    tau: Vec<usize>,
}

/// Values of one level's state, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSnapshot {
    pub x: Tensor,
    pub c: Tensor,
    pub d: Tensor,
    pub s: Tensor,
    pub post_mean: Tensor,
    pub post_log_var: Tensor,
    pub p_ch_mean: Tensor,
    pub p_ch_valid: Vec<bool>,
    pub tau: Vec<usize>,
}

impl LevelSnapshot {
    /// Whether row `r` of the routed state (x, c, d, s, posterior) is bitwise identical.
    pub fn row_frozen(&self, other: &Self, r: usize) -> bool {
        let same = |a: &Tensor, b: &Tensor| {
            a.row_slice(r)
                .iter()
                .zip(b.row_slice(r))
                .all(|(x, y)| x.to_bits() == y.to_bits())
        };
        same(&self.x, &other.x)
            && same(&self.c, &other.c)
            && same(&self.d, &other.d)
            && same(&self.s, &other.s)
            && same(&self.post_mean, &other.post_mean)
            && same(&self.post_log_var, &other.post_log_var)
    }
}

/// Entropy and cross-entropy terms behind `D_st` and `D_ch`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlParts {
    pub entropy_st: f64,
    pub entropy_ch: f64,
    pub cross_st: f64,
    pub cross_ch: f64,
}

/// What happened at one step.
#[derive(Clone, Debug)]
pub struct StepInfo {
    /// `[level][row]`.
    pub mask: Vec<Vec<bool>>,
    /// `[level][row]`; present where criteria were evaluated.
    pub decisions: Vec<Vec<Option<Decision>>>,
    /// `[level][row]`; filled only when [`Runtime::record_parts`] is set.
    pub parts: Vec<Vec<Option<KlParts>>>,
    /// Reconstruction output for this step, `[rows, obs_dim]`.
    pub output: Var,
}

/// Runs a batch of episodes through the hierarchy on one graph.
pub struct Runtime<'m> {
    model: &'m Hierarchy,
    store: &'m ParamStore,
    pub graph: Graph,
    levels: Vec<LevelVars>,
    rows: usize,
    t: usize,
    sampling: Sampling,
    masks: Vec<DecisionMask>,
    recon: Option<Var>,
    kl: Vec<Option<Var>>,
    pub counters: Counters,
    /// Record [`KlParts`] for every criterion evaluation.
    pub record_parts: bool,
}

fn any(m: &[bool]) -> bool {
    m.iter().any(|&b| b)
}

impl<'m> Runtime<'m> {
    pub fn new(
        model: &'m Hierarchy,
        store: &'m ParamStore,
        rows: usize,
        sampling: Sampling,
    ) -> Result<Self> {
        if rows == 0 {
            return Err(VprError::Config("batch must have at least one row".into()));
        }
        let mut graph = Graph::new();
        let (s, x) = (model.latent_dim(), model.deter_dim());
        let n = model.num_levels();
        let mut levels = Vec::with_capacity(n);
        for _ in 0..n {
            let zx = graph.constant(Tensor::zeros(&[rows, x]))?;
            let zs = graph.constant(Tensor::zeros(&[rows, s]))?;
            let std = GaussianNode::standard(&mut graph, rows, s)?;
            levels.push(LevelVars {
                x: zx,
                c: zx,
                d: zx,
                s: zs,
                post: std,
                p_ch: std,
                d_cand: zx,
                p_ch_valid: vec![false; rows],
                tau: vec![0; rows],
            });
        }
        Ok(Self {
            model,
            store,
            graph,
            levels,
            rows,
            t: 0,
            sampling,
            masks: vec![DecisionMask::new(n); rows],
            recon: None,
            kl: vec![None; n],
            counters: Counters {
                encoder_calls: vec![0; n],
                ..Counters::default()
            },
            record_parts: false,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Objective steps taken so far.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn masks(&self) -> &[DecisionMask] {
        &self.masks
    }

    pub fn into_masks(self) -> Vec<DecisionMask> {
        self.masks
    }

    pub fn snapshot(&self, level: usize) -> LevelSnapshot {
        let lv = &self.levels[level];
        let g = &self.graph;
        LevelSnapshot {
            x: g.value(lv.x).clone(),
            c: g.value(lv.c).clone(),
            d: g.value(lv.d).clone(),
            s: g.value(lv.s).clone(),
            post_mean: g.value(lv.post.mean).clone(),
            post_log_var: g.value(lv.post.log_var).clone(),
            p_ch_mean: g.value(lv.p_ch.mean).clone(),
            p_ch_valid: lv.p_ch_valid.clone(),
            tau: lv.tau.clone(),
        }
    }

    /// Current posterior node of a level.
    pub fn posterior(&self, level: usize) -> GaussianNode {
        self.levels[level].post
    }

    /// Current state sample (or mean) node of a level.
    pub fn state(&self, level: usize) -> Var {
        self.levels[level].s
    }

    /// Deterministic temporal context node of a level.
    pub fn temporal(&self, level: usize) -> Var {
        self.levels[level].d
    }

    /// Top-down context node of a level.
    pub fn context(&self, level: usize) -> Var {
        self.levels[level].c
    }

    /// Summed masked KL of each level so far.
    pub fn kl_totals(&self) -> Vec<f64> {
        self.kl
            .iter()
            .map(|v| v.map_or(0.0, |v| self.graph.value(v).data()[0]))
            .collect()
    }

    pub fn recon_total(&self) -> f64 {
        self.recon.map_or(0.0, |v| self.graph.value(v).data()[0])
    }

    /// Negative ELBO averaged over rows: reconstruction plus `beta` times the
    /// KL of every level summed over that level's update steps.
    pub fn loss(&mut self, beta: f64) -> Result<Var> {
        let g = &mut self.graph;
        let mut total = match self.recon {
            Some(r) => r,
            None => return Err(VprError::Contract("loss requested before any step".into())),
        };
        for kl in self.kl.iter().flatten() {
            let scaled = g.scale(*kl, beta)?;
            total = g.add(total, scaled)?;
        }
        Ok(g.scale(total, 1.0 / self.rows as f64)?)
    }

    /// Cuts the gradient history: carried state becomes constant and the
    /// loss restarts from the next step.
    pub fn truncate(&mut self) -> Result<()> {
        let g = &mut self.graph;
        let mut freeze = |v: Var| -> Result<Var> { Ok(g.constant(g.value(v).clone())?) };
        for lv in &mut self.levels {
            lv.x = freeze(lv.x)?;
            lv.c = freeze(lv.c)?;
            lv.d = freeze(lv.d)?;
            lv.s = freeze(lv.s)?;
            lv.d_cand = freeze(lv.d_cand)?;
            for node in [&mut lv.post, &mut lv.p_ch] {
                node.mean = freeze(node.mean)?;
                node.log_var = freeze(node.log_var)?;
            }
        }
        self.recon = None;
        self.kl.iter_mut().for_each(|k| *k = None);
        Ok(())
    }

    fn accumulate(slot: &mut Option<Var>, g: &mut Graph, v: Var) -> Result<()> {
        *slot = Some(match *slot {
            Some(acc) => g.add(acc, v)?,
            None => v,
        });
        Ok(())
    }

    fn select_into(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var> {
        Ok(self.graph.select_rows(mask, on, off)?)
    }

    /// Processes one observation per row.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        obs: &Tensor,
        detector: &mut Detector,
        rng: &mut R,
    ) -> Result<StepInfo> {
        let (rows, cols) = obs.dims2()?;
        if rows != self.rows || cols != self.model.config().obs_dim {
            return Err(VprError::Dimension(format!(
                "observation batch is {rows}x{cols}, expected {}x{}",
                self.rows,
                self.model.config().obs_dim
            )));
        }
        if detector.slots() != self.rows {
            return Err(VprError::Dimension(format!(
                "detector has {} slots for {} rows",
                detector.slots(),
                self.rows
            )));
        }
        let model = self.model;
        let store = self.store;
        let n = model.num_levels();
        let t = self.t;
        let b = self.rows;
        let o = self.graph.constant(obs.clone())?;

        // Bottom-up: build the mask, lifting encodings only while some row is open.
        let mut x_new: Vec<Option<Var>> = vec![None; n];
        let mut mask = vec![vec![false; b]; n];
        let mut decisions: Vec<Vec<Option<Decision>>> = vec![vec![None; b]; n];
        let mut parts: Vec<Vec<Option<KlParts>>> = vec![vec![None; b]; n];
        x_new[0] = Some(model.encode(&mut self.graph, store, o)?);
        self.counters.encoder_calls[0] += 1;
        mask[0] = vec![true; b];
        for i in 1..n {
            let open_below = mask[i - 1].clone();
            if !any(&open_below) {
                break;
            }
            let x = model.lift(
                &mut self.graph,
                store,
                i - 1,
                x_new[i - 1].expect("lifted below"),
            )?;
            self.counters.encoder_calls[i] += 1;
            x_new[i] = Some(x);
            if t == 0 {
                mask[i] = open_below;
                continue;
            }
            match &model.config().update_mode {
                UpdateMode::Fixed(k) => {
                    let due = t % k[i] == 0;
                    mask[i] = open_below.iter().map(|&o| o && due).collect();
                }
                UpdateMode::Adaptive => {
                    let (d_st, d_ch, nodes) = self.divergences(i, x, &open_below)?;
                    for r in (0..b).filter(|&r| open_below[r]) {
                        if self.record_parts {
                            let [q_st, q_ch, p_st, p_ch] =
                                nodes.map(|node| node.row(&self.graph, r));
                            parts[i][r] = Some(KlParts {
                                entropy_st: q_st.entropy(),
                                entropy_ch: q_ch.entropy(),
                                cross_st: q_st.cross_entropy(&p_st)?,
                                cross_ch: q_ch.cross_entropy(&p_ch)?,
                            });
                        }
                        let dec = decide(
                            d_st[r],
                            d_ch[r],
                            &mut detector.windows[r][i],
                            &detector.config,
                        );
                        self.counters.criteria_calls += 1;
                        mask[i][r] = dec.open;
                        decisions[i][r] = Some(dec);
                    }
                }
                UpdateMode::Toy => unreachable!("rejected at construction"),
            }
        }

        // Top-down: infer new states at open levels, highest first.
        let mut ctx_from_above: Option<Var> = None;
        let mut output = None;
        for i in (0..n).rev() {
            let m = mask[i].clone();
            if !any(&m) {
                ctx_from_above = None;
                continue;
            }
            let lv = self.levels[i].clone();
            let c_new = match ctx_from_above {
                Some(ctx) => self.select_into(&mask[i + 1], ctx, lv.c)?,
                None => lv.c,
            };
            let top = i + 1 == n;
            let (d_new, prior) = if t == 0 {
                let p = if top {
                    GaussianNode::standard(&mut self.graph, b, model.latent_dim())?
                } else {
                    model.prior(&mut self.graph, store, i, lv.d, c_new)?
                };
                (lv.d, p)
            } else {
                let d_cand = model.transition(&mut self.graph, store, i, lv.s, lv.d)?;
                let p = model.prior(&mut self.graph, store, i, d_cand, c_new)?;
                (d_cand, p)
            };
            let x = x_new[i].expect("open levels were lifted");
            let q = model.posterior(&mut self.graph, store, i, x, d_new, c_new)?;
            let s_new = match self.sampling {
                Sampling::Mean => q.mean,
                Sampling::Sample => {
                    let eps = standard_normal(rng, b, model.latent_dim());
                    q.rsample(&mut self.graph, eps)?
                }
            };
            let kl = q.kl_rows(&mut self.graph, &prior)?;
            let zero = self.graph.constant(Tensor::zeros(&[b, 1]))?;
            let kl = self.graph.select_rows(&m, kl, zero)?;
            let kl = self.graph.sum(kl)?;
            Self::accumulate(&mut self.kl[i], &mut self.graph, kl)?;

            let committed = LevelVars {
                x: self.select_into(&m, x, lv.x)?,
                c: self.select_into(&m, c_new, lv.c)?,
                d: self.select_into(&m, d_new, lv.d)?,
                s: self.select_into(&m, s_new, lv.s)?,
                post: GaussianNode::select_rows(&mut self.graph, &m, &q, &lv.post)?,
                p_ch: lv.p_ch,
                d_cand: lv.d_cand,
                p_ch_valid: lv
                    .p_ch_valid
                    .iter()
                    .zip(&m)
                    .map(|(&v, &u)| v && !u)
                    .collect(),
                tau: lv
                    .tau
                    .iter()
                    .zip(&m)
                    .map(|(&k, &u)| k + usize::from(u))
                    .collect(),
            };
            let ctx = model.decode(&mut self.graph, store, i, committed.s, committed.c)?;
            self.levels[i] = committed;
            if i == 0 {
                let out = model.reconstruct(&mut self.graph, store, ctx)?;
                let rec = model.recon_rows(&mut self.graph, out, o)?;
                let rec = self.graph.sum(rec)?;
                Self::accumulate(&mut self.recon, &mut self.graph, rec)?;
                output = Some(out);
            }
            ctx_from_above = Some(ctx);
        }

        for (r, dm) in self.masks.iter_mut().enumerate() {
            dm.push((0..n).map(|i| mask[i][r]).collect())?;
        }
        self.t += 1;
        Ok(StepInfo {
            mask,
            decisions,
            parts,
            output: output.expect("the first level always updates"),
        })
    }

    /// `D_st` and `D_ch` for every row of level `i` (rows not in `eval` are
    /// computed but ignored). Computes and stores the change prior for rows
    /// that do not hold one yet.
    /// Also returns the nodes `[q_st, q_ch, p_st, p_ch]`.
    #[allow(clippy::type_complexity)]
    fn divergences(
        &mut self,
        i: usize,
        x: Var,
        eval: &[bool],
    ) -> Result<(Vec<f64>, Vec<f64>, [GaussianNode; 4])> {
        let model = self.model;
        let store = self.store;
        let lv = self.levels[i].clone();
        let need: Vec<bool> = eval
            .iter()
            .zip(&lv.p_ch_valid)
            .map(|(&e, &v)| e && !v)
            .collect();
        let (mut p_ch, mut d_cand) = (lv.p_ch, lv.d_cand);
        if any(&need) {
            let fresh_d = model.transition(&mut self.graph, store, i, lv.s, lv.d)?;
            let fresh = model.prior(&mut self.graph, store, i, fresh_d, lv.c)?;
            p_ch = GaussianNode::select_rows(&mut self.graph, &need, &fresh, &lv.p_ch)?;
            d_cand = self.graph.select_rows(&need, fresh_d, lv.d_cand)?;
            self.counters.change_prior_rows += need.iter().filter(|&&u| u).count();
        }
        let q_st = model.posterior(&mut self.graph, store, i, x, lv.d, lv.c)?;
        let q_ch = model.posterior(&mut self.graph, store, i, x, d_cand, lv.c)?;
        let d_st = q_st.kl_values(&self.graph, &lv.post);
        let d_ch = q_ch.kl_values(&self.graph, &p_ch);
        let level = &mut self.levels[i];
        level.p_ch = p_ch;
        level.d_cand = d_cand;
        for (v, &u) in level.p_ch_valid.iter_mut().zip(&need) {
            *v |= u;
        }
        Ok((d_st, d_ch, [q_st, q_ch, lv.post, p_ch]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HierarchyConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(levels: usize, mode: UpdateMode) -> (Hierarchy, ParamStore) {
        let cfg = HierarchyConfig {
            num_levels: levels,
            latent_dim: 2,
            deter_dim: 5,
            obs_dim: 3,
            layers: 2,
            update_mode: mode,
            ..HierarchyConfig::default()
        };
        let mut store = ParamStore::new();
        let m = Hierarchy::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        (m, store)
    }

    #[test]
    fn constant_stream_stops_higher_updates() {
        let (m, store) = model(3, UpdateMode::Adaptive);
        let mut det = Detector::new(DetectorConfig::default(), 2, 3);
        let mut rt = Runtime::new(&m, &store, 2, Sampling::Mean).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obs = Tensor::from_rows(&[vec![0.2, -0.1, 0.4], vec![1.0, 0.0, 0.5]]).unwrap();
        for _ in 0..12 {
            rt.step(&obs, &mut det, &mut rng).unwrap();
        }
        for dm in rt.masks() {
            assert_eq!(dm.update_counts()[0], 12);
            assert!(dm.is_nested());
        }
    }

    #[test]
    fn fixed_mode_never_evaluates_criteria() {
        let (m, store) = model(3, UpdateMode::Fixed(vec![1, 2, 4]));
        let mut det = Detector::new(DetectorConfig::default(), 1, 3);
        let mut rt = Runtime::new(&m, &store, 1, Sampling::Sample).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in 0..9 {
            let obs = Tensor::from_rows(&[vec![t as f64 * 0.1, 0.0, 1.0]]).unwrap();
            rt.step(&obs, &mut det, &mut rng).unwrap();
        }
        assert_eq!(rt.counters.criteria_calls, 0);
        assert_eq!(rt.masks()[0].subjective_steps(1), vec![0, 2, 4, 6, 8]);
        assert_eq!(rt.masks()[0].subjective_steps(2), vec![0, 4, 8]);
        // Lazy encoding: the third level is lifted only on its due steps' parents.
        assert_eq!(rt.counters.encoder_calls, vec![9, 9, 5]);
    }

    #[test]
    fn observation_shape_checked() {
        let (m, store) = model(1, UpdateMode::Adaptive);
        let mut det = Detector::new(DetectorConfig::default(), 1, 1);
        let mut rt = Runtime::new(&m, &store, 1, Sampling::Mean).unwrap();
        let bad = Tensor::zeros(&[1, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            rt.step(&bad, &mut det, &mut rng),
            Err(VprError::Dimension(_))
        ));
    }

    #[test]
    fn beta_zero_loss_is_reconstruction() {
        let (m, store) = model(2, UpdateMode::Adaptive);
        let mut det = Detector::new(DetectorConfig::default(), 2, 2);
        let mut rt = Runtime::new(&m, &store, 2, Sampling::Sample).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in 0..4 {
            let obs =
                Tensor::from_rows(&[vec![t as f64, 0.0, 1.0], vec![0.5, t as f64, 0.0]]).unwrap();
            rt.step(&obs, &mut det, &mut rng).unwrap();
        }
        let loss = rt.loss(0.0).unwrap();
        let v = rt.graph.value(loss).item().unwrap();
        assert_eq!(v, rt.recon_total() / 2.0);
    }

    #[test]
    fn windows_are_copied_per_row() {
        let mut det = Detector::new(DetectorConfig::default(), 2, 2);
        det.windows[1][1].push(3.0);
        let wide = det.for_rows(5);
        assert_eq!(wide.slots(), 5);
        assert_eq!(wide.window(3, 1).len(), 1);
        assert_eq!(wide.window(2, 1).len(), 0);
    }
}
