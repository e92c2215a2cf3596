//! Closed-form cost model, instrumented MAC counts, logit-lens KL and the
//! memory-width sweep.

use std::io::Write;

use rayon::prelude::*;

use crate::backbone::{MekiPath, Model};
use crate::config::{ModelConfig, ProjectorKind};
use crate::error::{Error, Result};
use crate::meki::scope;
use crate::numerics::{Graph, MacLedger, Scalar};
use crate::reparam::BankDType;
use crate::trainer::{self, Corpus, TrainConfig};

/// Per-token costs of the memory branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub n_layers: u64,
    pub d_model: u64,
    pub d_mem: u64,
    pub vocab_size: u64,
    pub dtype: BankDType,
    /// Projector plus gate and output projections, one layer.
    pub train_macs_per_token_per_layer: u64,
    /// Gate and output projections only, one layer.
    pub infer_macs_per_token_per_layer: u64,
    /// Bytes read from the bank for one token across all layers.
    pub rom_bytes_per_token_full_depth: u64,
    pub memory_weight_count: u64,
    /// Set when `d_model` is odd and the projector width was floored.
    pub approximate: bool,
}

impl CostReport {
    pub const CSV_HEADER: &'static str = "n_layers,d_model,d_mem,vocab_size,dtype,train_macs_per_token_per_layer,\
infer_macs_per_token_per_layer,train_flops_per_token_per_layer,infer_flops_per_token_per_layer,\
rom_bytes_per_token_full_depth,memory_weight_count,approximate";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.n_layers,
            self.d_model,
            self.d_mem,
            self.vocab_size,
            self.dtype,
            self.train_macs_per_token_per_layer,
            self.infer_macs_per_token_per_layer,
            2 * self.train_macs_per_token_per_layer,
            2 * self.infer_macs_per_token_per_layer,
            self.rom_bytes_per_token_full_depth,
            self.memory_weight_count,
            self.approximate
        )
    }
}

/// Branch costs from the config alone; no model is built.
pub fn cost_model(cfg: &ModelConfig, dtype: BankDType) -> Result<CostReport> {
    cfg.validate()?;
    let (l, d, m, v) = (cfg.n_layers as u64, cfg.d_model as u64, cfg.d_mem as u64, cfg.vocab_size as u64);
    let projector = match cfg.projector_kind {
        ProjectorKind::SwiGlu => {
            let hid = cfg.projector_hidden() as u64;
            2 * d * hid + hid * m
        }
        ProjectorKind::Linear => d * m,
    };
    let infer = 2 * d * m;
    Ok(CostReport {
        n_layers: l,
        d_model: d,
        d_mem: m,
        vocab_size: v,
        dtype,
        train_macs_per_token_per_layer: projector + infer,
        infer_macs_per_token_per_layer: infer,
        rom_bytes_per_token_full_depth: l * m * dtype.size_of() as u64,
        memory_weight_count: l * v * m,
        approximate: cfg.projector_kind == ProjectorKind::SwiGlu && d % 2 == 1,
    })
}

/// MACs a forward pass actually performed, by component.
#[derive(Debug, Clone, PartialEq)]
pub struct MacCounts {
    pub tokens: u64,
    pub n_layers: u64,
    pub projector: u64,
    pub gate: u64,
    pub out: u64,
    pub branch_total: u64,
    pub ledger: MacLedger,
}

impl MacCounts {
    /// Branch MACs divided evenly over tokens and layers.
    pub fn branch_per_token_per_layer(&self) -> f64 {
        self.branch_total as f64 / (self.tokens * self.n_layers) as f64
    }
}

/// Run `ids` (one sequence) with counting enabled and tally the branch.
pub fn instrumented_mac_count<S: Scalar>(model: &Model<S>, ids: &[usize], path: MekiPath<'_>) -> Result<MacCounts> {
    let mut g = Graph::inference().count_macs();
    model.forward_graph(&mut g, ids, ids.len(), path)?;
    let ledger = g.mac_ledger().cloned().ok_or_else(|| Error::Internal("MAC ledger missing".into()))?;
    Ok(MacCounts {
        tokens: ids.len() as u64,
        n_layers: model.config.n_layers as u64,
        projector: ledger.get(scope::PROJECTOR),
        gate: ledger.get(scope::GATE),
        out: ledger.get(scope::OUT),
        branch_total: ledger.total_with_prefix(scope::PREFIX),
        ledger,
    })
}

/// KL of one layer's lens against the final distribution, averaged over positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerKl {
    pub layer: usize,
    /// `KL(final ‖ lens)`.
    pub kl_final_lens: f64,
    /// `KL(lens ‖ final)`.
    pub kl_lens_final: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LensReport {
    pub positions: usize,
    pub layers: Vec<LayerKl>,
}

impl LensReport {
    /// Mean `KL(final ‖ lens)` over layers `from..to`.
    pub fn mean_kl(&self, from: usize, to: usize) -> f64 {
        let sel = &self.layers[from..to];
        sel.iter().map(|l| l.kl_final_lens).sum::<f64>() / sel.len() as f64
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// `Σ p (log p − log q)` from log-probabilities.
fn kl(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter().zip(logq).map(|(lp, lq)| lp.exp() * (lp - lq)).sum()
}

const LENS_CHUNK: usize = 8;

/// Project every block's output through the final norm and output head and
/// compare with the model's own prediction, over `n_sequences` fixed windows.
pub fn logit_lens_kl<S: Scalar>(model: &Model<S>, stream: &[usize], n_sequences: usize, seq_len: usize) -> Result<LensReport> {
    let need = n_sequences * seq_len;
    if n_sequences == 0 || stream.len() < need {
        return Err(Error::Config(format!(
            "lens needs {need} tokens, stream has {}",
            stream.len()
        )));
    }
    let n_layers = model.config.n_layers;
    let starts: Vec<usize> = (0..n_sequences).map(|i| i * seq_len).collect();
    let partial = starts
        .par_chunks(LENS_CHUNK)
        .map(|chunk| -> Result<Vec<(f64, f64)>> {
            let ids: Vec<usize> = chunk.iter().flat_map(|&s| stream[s..s + seq_len].iter().copied()).collect();
            let mut g = Graph::inference();
            let vars = model.forward_graph(&mut g, &ids, seq_len, MekiPath::Train)?;
            let final_logits = g.value(vars.logits).to_f64_vec();
            let v = model.config.vocab_size;
            let final_lp: Vec<Vec<f64>> = final_logits.chunks(v).map(log_softmax).collect();
            let mut sums = vec![(0.0, 0.0); n_layers];
            for (l, &h) in vars.hidden.iter().enumerate() {
                let lens = model.lens_logits(&mut g, h)?;
                let lens = g.value(lens).to_f64_vec();
                for (row, lp) in lens.chunks(v).zip(&final_lp) {
                    let lq = log_softmax(row);
                    sums[l].0 += kl(lp, &lq);
                    sums[l].1 += kl(&lq, lp);
                }
            }
            Ok(sums)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut totals = vec![(0.0, 0.0); n_layers];
    for p in partial {
        for (t, s) in totals.iter_mut().zip(p) {
            t.0 += s.0;
            t.1 += s.1;
        }
    }
    let positions = need;
    Ok(LensReport {
        positions,
        layers: totals
            .into_iter()
            .enumerate()
            .map(|(layer, (a, b))| LayerKl {
                layer,
                kl_final_lens: a / positions as f64,
                kl_lens_final: b / positions as f64,
            })
            .collect(),
    })
}

/// CSV with header `model,layer,kl_final_lens,kl_lens_final`.
pub fn write_lens_csv(reports: &[(&str, &LensReport)], mut w: impl Write) -> Result<()> {
    writeln!(w, "model,layer,kl_final_lens,kl_lens_final")?;
    for (label, r) in reports {
        for l in &r.layers {
            writeln!(w, "{label},{},{},{}", l.layer, l.kl_final_lens, l.kl_lens_final)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub d_mem: usize,
    pub memory_weights: u64,
    /// Final validation loss per seed; `None` for failed runs.
    pub seed_losses: Vec<Option<f64>>,
    /// Mean over successful seeds.
    pub mean_val_loss: Option<f64>,
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub fit: Option<LogLinearFit>,
}

/// `loss ≈ a − b·ln(memory_weights)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLinearFit {
    pub a: f64,
    pub b: f64,
    pub r2: f64,
}

/// Least-squares fit of `y ≈ a − b·ln(x)`. Needs two distinct `x`.
pub fn fit_log_linear(points: &[(f64, f64)]) -> Option<LogLinearFit> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(LogLinearFit {
        a: intercept,
        b: -slope,
        r2,
    })
}

/// True when `values` never increase, except for at most one step up of no
/// more than `tolerance`.
pub fn non_increasing_with_tolerance(values: &[f64], tolerance: f64) -> bool {
    let mut inversions = 0;
    for w in values.windows(2) {
        let rise = w[1] - w[0];
        if rise > 0.0 {
            if rise > tolerance {
                return false;
            }
            inversions += 1;
        }
    }
    inversions <= 1
}

/// Train one model per `(d_mem, seed)` on the same corpus and fit the trend.
/// Failed runs are recorded and the sweep carries on.
pub fn dmem_sweep<S: Scalar>(
    base: &ModelConfig,
    d_mems: &[usize],
    train_cfg: &TrainConfig,
    corpus: &Corpus,
    seeds: &[u64],
) -> Result<SweepReport> {
    if d_mems.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one d_mem and one seed".into()));
    }
    if d_mems.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!("d_mem list must be strictly ascending, got {d_mems:?}")));
    }
    let jobs: Vec<(usize, u64)> = d_mems.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    let results: Vec<std::result::Result<f64, String>> = jobs
        .par_iter()
        .map(|&(m, seed)| {
            let cfg = ModelConfig { d_mem: m, ..base.clone() };
            let tc = TrainConfig { seed, ..train_cfg.clone() };
            match trainer::train::<S>(&cfg, &tc, corpus) {
                Ok(out) => Ok(out.final_val_loss),
                Err(e) => {
                    log::warn!("sweep run d_mem={m} seed={seed} failed: {e}");
                    Err(e.to_string())
                }
            }
        })
        .collect();

    let mut rows = Vec::with_capacity(d_mems.len());
    for (i, &m) in d_mems.iter().enumerate() {
        let chunk = &results[i * seeds.len()..(i + 1) * seeds.len()];
        let seed_losses: Vec<Option<f64>> = chunk.iter().map(|r| r.as_ref().ok().copied()).collect();
        let ok: Vec<f64> = seed_losses.iter().flatten().copied().collect();
        let status = match chunk.iter().find_map(|r| r.as_ref().err()) {
            Some(e) => RunStatus::Failed(e.clone()),
            None => RunStatus::Ok,
        };
        rows.push(SweepRow {
            d_mem: m,
            memory_weights: (base.n_layers * base.vocab_size * m) as u64,
            mean_val_loss: (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64),
            seed_losses,
            status,
        });
    }
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| r.mean_val_loss.map(|l| (r.memory_weights as f64, l)))
        .collect();
    Ok(SweepReport {
        fit: fit_log_linear(&points),
        rows,
    })
}

/// CSV with header `d_mem,memory_weights,final_val_loss,status`, followed by
/// comment lines carrying the fit.
pub fn write_sweep_csv(report: &SweepReport, mut w: impl Write) -> Result<()> {
    writeln!(w, "d_mem,memory_weights,final_val_loss,status")?;
    for r in &report.rows {
        let loss = r.mean_val_loss.map(|l| l.to_string()).unwrap_or_default();
        let status = match &r.status {
            RunStatus::Ok => "ok".to_string(),
            RunStatus::Failed(e) => format!("failed: {}", e.replace(',', ";")),
        };
        writeln!(w, "{},{},{},{}", r.d_mem, r.memory_weights, loss, status)?;
    }
    if let Some(fit) = report.fit {
        writeln!(w, "# fit: loss = {} - {} * ln(memory_weights), r2 = {}", fit.a, fit.b, fit.r2)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{InjectionPosition, Variant};
    use crate::reparam::fold_model;
    use crate::trainer::{generate_corpus, SyntheticCorpusSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_costs() {
        let mut cfg = ModelConfig::meki_0_6b();
        let r = cost_model(&cfg, BankDType::F16).unwrap();
        assert_eq!(r.memory_weight_count, 543_621_120);
        assert_eq!(r.train_macs_per_token_per_layer, 1_376_256);
        assert_eq!(r.infer_macs_per_token_per_layer, 262_144);
        assert!(!r.approximate);
        cfg.d_mem = 256;
        assert_eq!(cost_model(&cfg, BankDType::F16).unwrap().rom_bytes_per_token_full_depth, 14_336);
        assert_eq!(cost_model(&cfg, BankDType::F32).unwrap().rom_bytes_per_token_full_depth, 28_672);
    }

    #[test]
    fn odd_width_is_flagged() {
        let cfg = ModelConfig { d_model: 33, n_heads: 3, d_mem: 8, ..ModelConfig::toy() };
        let r = cost_model(&cfg, BankDType::F32).unwrap();
        assert!(r.approximate);
        assert_eq!(r.train_macs_per_token_per_layer, 2 * 33 * 16 + 16 * 8 + 2 * 33 * 8);
        assert!(r.csv_row().ends_with(",true"));
        assert_eq!(CostReport::CSV_HEADER.split(',').count(), r.csv_row().split(',').count());
    }

    fn small(position: InjectionPosition, kind: ProjectorKind) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            d_mem: 4,
            vocab_size: 23,
            n_heads: 2,
            d_ffn: 24,
            max_seq_len: 16,
            position,
            projector_kind: kind,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn counted_macs_equal_the_closed_form() {
        for &position in InjectionPosition::ALL {
            for kind in [ProjectorKind::SwiGlu, ProjectorKind::Linear] {
                let cfg = small(position, kind);
                let m = Model::<f32>::init(cfg.clone(), 1).unwrap();
                let ids = [1, 2, 3, 4, 5, 6, 7];
                let cost = cost_model(&cfg, BankDType::F32).unwrap();
                let train = instrumented_mac_count(&m, &ids, MekiPath::Train).unwrap();
                assert_eq!(train.branch_total, 7 * 2 * cost.train_macs_per_token_per_layer);
                let bank = fold_model(&m, BankDType::F32, 0).unwrap();
                let fused = instrumented_mac_count(&m, &ids, MekiPath::Fused(&bank)).unwrap();
                assert_eq!(fused.branch_total, 7 * 2 * cost.infer_macs_per_token_per_layer);
                assert_eq!(fused.projector, 0);
                assert_eq!(fused.branch_per_token_per_layer(), 2.0 * 16.0 * 4.0);
                // The rest of the network is untouched by folding.
                let rest = |c: &MacCounts| c.ledger.total() - c.branch_total;
                assert_eq!(rest(&train), rest(&fused));
            }
        }
        let mut base = small(InjectionPosition::ParallelFfn, ProjectorKind::SwiGlu);
        base.variant = Variant::Disabled;
        let m = Model::<f32>::init(base, 1).unwrap();
        assert_eq!(instrumented_mac_count(&m, &[1, 2], MekiPath::Train).unwrap().branch_total, 0);
    }

    #[test]
    fn lens_final_layer_is_zero_and_all_nonnegative() {
        let cfg = small(InjectionPosition::ParallelFfn, ProjectorKind::SwiGlu);
        let mut m = Model::<f64>::init(cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in m.store.iter_mut() {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let stream: Vec<usize> = (0..200).map(|_| rng.random_range(0..23)).collect();
        let r = logit_lens_kl(&m, &stream, 10, 12).unwrap();
        assert_eq!(r.positions, 120);
        assert_eq!(r.layers[1].kl_final_lens, 0.0);
        assert_eq!(r.layers[1].kl_lens_final, 0.0);
        assert!(r.layers[0].kl_final_lens > 0.0 && r.layers[0].kl_lens_final > 0.0);
        let mut out = Vec::new();
        write_lens_csv(&[("meki", &r)], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("model,layer,kl_final_lens,kl_lens_final\nmeki,0,"));
        assert!(logit_lens_kl(&m, &stream[..50], 10, 12).is_err());
    }

    #[test]
    fn kl_oracle_on_two_point_distributions() {
        let p = log_softmax(&[0.0, 0.0]);
        let q = log_softmax(&[0.0, 3f64.ln()]);
        let want = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((kl(&p, &q) - want).abs() < 1e-15);
    }

    #[test]
    fn log_linear_fit_recovers_exact_line() {
        let pts: Vec<(f64, f64)> = [10.0, 100.0, 1000.0].iter().map(|&x: &f64| (x, 5.0 - 0.3 * x.ln())).collect();
        let fit = fit_log_linear(&pts).unwrap();
        assert!((fit.a - 5.0).abs() < 1e-12 && (fit.b - 0.3).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        assert!(fit_log_linear(&pts[..1]).is_none());
        assert!(fit_log_linear(&[(5.0, 1.0), (5.0, 2.0)]).is_none());
    }

    #[test]
    fn monotone_check() {
        assert!(non_increasing_with_tolerance(&[3.0, 2.0, 2.0, 1.0], 0.005));
        assert!(non_increasing_with_tolerance(&[3.0, 2.0, 2.004, 1.0], 0.005));
        assert!(!non_increasing_with_tolerance(&[3.0, 2.0, 2.01, 1.0], 0.005));
        assert!(!non_increasing_with_tolerance(&[3.0, 3.001, 2.0, 2.001], 0.005));
    }

    #[test]
    fn sweep_rows_and_csv() {
        let spec = SyntheticCorpusSpec {
            vocab_size: 32,
            train_tokens: 2000,
            val_tokens: 600,
            ..SyntheticCorpusSpec::toy()
        };
        let corpus = generate_corpus(&spec).unwrap();
        let base = ModelConfig {
            n_layers: 1,
            d_model: 16,
            d_mem: 2,
            vocab_size: 32,
            n_heads: 2,
            d_ffn: 16,
            max_seq_len: 16,
            ..ModelConfig::toy()
        };
        let tc = TrainConfig {
            steps: 6,
            batch_size: 2,
            seq_len: 8,
            warmup_steps: 1,
            eval_interval: 3,
            eval_sequences: 4,
            ..TrainConfig::toy()
        };
        let r = dmem_sweep::<f32>(&base, &[2, 4, 16], &tc, &corpus, &[0, 1]).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.rows[1].memory_weights, 32 * 4);
        assert!(r.rows[..2].iter().all(|row| row.status == RunStatus::Ok && row.mean_val_loss.is_some()));
        // d_mem = d_model is rejected by config validation: a failure row, not an abort.
        assert!(matches!(r.rows[2].status, RunStatus::Failed(_)));
        assert!(r.rows[2].mean_val_loss.is_none());
        let mut out = Vec::new();
        write_sweep_csv(&r, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("d_mem,memory_weights,final_val_loss,status\n2,64,"));
        assert!(text.contains("\n16,512,,failed"));
        assert!(dmem_sweep::<f32>(&base, &[4, 2], &tc, &corpus, &[0]).is_err());
    }
}
