//! Evaluation: exact-match scoring of greedy decodes, paired bootstrap
//! significance, post-hoc linear probing of language identity, and a 2-D
//! PCA export of word states.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, ParamSet};
use crate::model::{self, ModelConfig, ModelError, SubwordVocab};
use crate::parsefmt;
use crate::rng::Pcg32;
use crate::synthdata::{Example, Grammar};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("prediction lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} resamples, got {got}")]
    TooFewResamples { need: usize, got: usize },
    #[error("fold {0} is single-class; not enough tokens per class")]
    DegenerateFold(usize),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("zero-variance input")]
    ZeroVariance,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredRecord {
    pub id: String,
    pub lang: String,
    pub gold: String,
    pub pred: String,
    pub em: bool,
    pub intent_ok: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub em_by_lang: BTreeMap<String, f64>,
    pub intent_by_lang: BTreeMap<String, f64>,
    pub count_by_lang: BTreeMap<String, usize>,
    pub records: Vec<PredRecord>,
}

impl EvalReport {
    pub fn overall_em(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.em).count() as f64 / self.records.len() as f64
    }
}

pub fn aggregate_records(records: Vec<PredRecord>) -> EvalReport {
    let mut em = BTreeMap::new();
    let mut intent = BTreeMap::new();
    let mut count: BTreeMap<String, usize> = BTreeMap::new();
    for r in &records {
        *count.entry(r.lang.clone()).or_default() += 1;
        *em.entry(r.lang.clone()).or_insert(0.0) += f64::from(r.em);
        *intent.entry(r.lang.clone()).or_insert(0.0) += f64::from(r.intent_ok);
    }
    for (lang, n) in &count {
        *em.get_mut(lang).unwrap() /= *n as f64;
        *intent.get_mut(lang).unwrap() /= *n as f64;
    }
    EvalReport {
        em_by_lang: em,
        intent_by_lang: intent,
        count_by_lang: count,
        records,
    }
}

/// Greedy-decode every example and score exact match and intent accuracy
/// per language. Malformed decodes count as wrong on both metrics.
pub fn evaluate(
    config: &ModelConfig,
    params: &ParamSet,
    grammar: &Grammar,
    vocab: &SubwordVocab,
    dataset: &[Example],
) -> Result<EvalReport, EvalError> {
    let mut records = Vec::with_capacity(dataset.len());
    for e in dataset {
        let query = model::encode_query(vocab, &e.words)?;
        let actions = model::greedy_decode(
            config,
            params,
            &grammar.ontology,
            &query,
            config.max_decode_steps,
        )?;
        let gold_tree = e
            .tree(&grammar.ontology)
            .map_err(|err| ModelError::Invalid(err.to_string()))?;
        let (pred, em, intent_ok) = match parsefmt::from_actions(&actions, e.words.len()) {
            Ok(tree) => match parsefmt::serialize(&tree, &e.words) {
                Ok(s) => {
                    let em = s == e.parse;
                    let intent_ok = parsefmt::intent_of(&tree) == parsefmt::intent_of(&gold_tree);
                    (s, em, intent_ok)
                }
                Err(_) => (parsefmt::render_actions(&actions), false, false),
            },
            Err(_) => (parsefmt::render_actions(&actions), false, false),
        };
        records.push(PredRecord {
            id: e.id.clone(),
            lang: e.lang.clone(),
            gold: e.parse.clone(),
            pred,
            em,
            intent_ok,
        });
    }
    Ok(aggregate_records(records))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BootstrapReport {
    /// Observed EM(a) − EM(b).
    pub diff: f64,
    pub p_value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub resamples: usize,
}

/// Paired bootstrap over per-example correctness: two-sided p-value for the
/// accuracy difference and a 95% percentile confidence interval.
pub fn bootstrap_compare(
    a_correct: &[bool],
    b_correct: &[bool],
    resamples: usize,
    seed: u64,
) -> Result<BootstrapReport, EvalError> {
    if a_correct.len() != b_correct.len() {
        return Err(EvalError::LengthMismatch(a_correct.len(), b_correct.len()));
    }
    if resamples < 1000 {
        return Err(EvalError::TooFewResamples {
            need: 1000,
            got: resamples,
        });
    }
    if a_correct.is_empty() {
        return Err(EvalError::TooFewSamples { need: 1, got: 0 });
    }
    let n = a_correct.len();
    let per_example: Vec<f64> = a_correct
        .iter()
        .zip(b_correct)
        .map(|(&a, &b)| f64::from(a) - f64::from(b))
        .collect();
    let observed = per_example.iter().sum::<f64>() / n as f64;

    let mut rng = Pcg32::new(seed).split("bootstrap");
    let mut diffs = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut s = 0.0;
        for _ in 0..n {
            s += per_example[rng.gen_range(n)];
        }
        diffs.push(s / n as f64);
    }
    diffs.sort_by(|x, y| x.partial_cmp(y).expect("finite diffs"));
    let le = diffs.iter().filter(|&&d| d <= 0.0).count() as f64 / resamples as f64;
    let ge = diffs.iter().filter(|&&d| d >= 0.0).count() as f64 / resamples as f64;
    let p_value = (2.0 * le.min(ge)).min(1.0);
    let pick = |q: f64| diffs[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Ok(BootstrapReport {
        diff: observed,
        p_value,
        ci_low: pick(0.025),
        ci_high: pick(0.975),
        resamples,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub fold_accuracy: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub variant: String,
}

fn train_logreg(xs: &[&[f64]], ys: &[f64], iters: usize, lr: f64) -> (Vec<f64>, f64) {
    let d = xs[0].len();
    let n = xs.len();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..iters {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let z = x.iter().zip(&w).map(|(xi, wi)| xi * wi).sum::<f64>() + b;
            let err = sigmoid(z) - y;
            for (g, xi) in gw.iter_mut().zip(*x) {
                *g += err * xi;
            }
            gb += err;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * g / n as f64;
        }
        b -= lr * gb / n as f64;
    }
    (w, b)
}

/// Stratified k-fold linear probe on frozen states: logistic regression by
/// full-batch gradient descent (2000 iterations, lr 0.1), with the training
/// side of each fold rebalanced to at worst 60/40 by resampling the
/// minority class.
pub fn fit_probe(
    states: &[Vec<f64>],
    labels: &[bool],
    folds: usize,
    seed: u64,
    variant: &str,
) -> Result<ProbeReport, EvalError> {
    if states.len() != labels.len() {
        return Err(EvalError::LengthMismatch(states.len(), labels.len()));
    }
    if states.len() < folds * 10 {
        return Err(EvalError::TooFewSamples {
            need: folds * 10,
            got: states.len(),
        });
    }
    let mut rng = Pcg32::new(seed).split("probe");
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    rng.shuffle(&mut pos);
    rng.shuffle(&mut neg);

    // stratified deal: fold f receives every folds-th index of each class
    let mut fold_members: Vec<Vec<usize>> = vec![Vec::new(); folds];
    for (i, &idx) in pos.iter().enumerate() {
        fold_members[i % folds].push(idx);
    }
    for (i, &idx) in neg.iter().enumerate() {
        fold_members[i % folds].push(idx);
    }

    let mut fold_accuracy = Vec::with_capacity(folds);
    for f in 0..folds {
        let test = &fold_members[f];
        if test.iter().all(|&i| labels[i]) || test.iter().all(|&i| !labels[i]) {
            return Err(EvalError::DegenerateFold(f));
        }
        let mut train: Vec<usize> = (0..folds)
            .filter(|&g| g != f)
            .flat_map(|g| fold_members[g].iter().copied())
            .collect();
        // rebalance the training side by resampling the minority class
        let mut fold_rng = rng.split(&format!("fold{f}"));
        loop {
            let p = train.iter().filter(|&&i| labels[i]).count();
            let minority = p.min(train.len() - p);
            if minority * 10 >= train.len() * 4 {
                break;
            }
            let want_pos = p * 2 < train.len();
            let pool: Vec<usize> = train
                .iter()
                .copied()
                .filter(|&i| labels[i] == want_pos)
                .collect();
            if pool.is_empty() {
                return Err(EvalError::DegenerateFold(f));
            }
            train.push(pool[fold_rng.gen_range(pool.len())]);
        }
        let xs: Vec<&[f64]> = train.iter().map(|&i| states[i].as_slice()).collect();
        let ys: Vec<f64> = train.iter().map(|&i| f64::from(labels[i])).collect();
        let (w, b) = train_logreg(&xs, &ys, 2000, 0.1);
        let correct = test
            .iter()
            .filter(|&&i| {
                let z = states[i].iter().zip(&w).map(|(x, wi)| x * wi).sum::<f64>() + b;
                (z > 0.0) == labels[i]
            })
            .count();
        fold_accuracy.push(correct as f64 / test.len() as f64);
    }
    let mean = fold_accuracy.iter().sum::<f64>() / folds as f64;
    let var = fold_accuracy
        .iter()
        .map(|a| (a - mean).powi(2))
        .sum::<f64>()
        / folds as f64;
    Ok(ProbeReport {
        fold_accuracy,
        mean,
        std: var.sqrt(),
        variant: variant.to_string(),
    })
}

/// Jacobi eigendecomposition of a symmetric matrix: (eigenvalues,
/// eigenvectors as columns), sorted by descending eigenvalue.
fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v = vec![vec![0.0; d]; d];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += m[i][j] * m[i][j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                if m[p][q].abs() < 1e-18 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| m[j][j].partial_cmp(&m[i][i]).expect("finite eigenvalues"));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[i][i]).collect();
    let eigenvectors: Vec<Vec<f64>> = order
        .iter()
        .map(|&col| (0..d).map(|r| v[r][col]).collect())
        .collect();
    (eigenvalues, eigenvectors)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Projection {
    /// One (x, y) per input state.
    pub coords: Vec<(f64, f64)>,
    pub eigenvalues: Vec<f64>,
    /// Sum of the discarded eigenvalues = mean squared reconstruction error
    /// of the 2-component PCA.
    pub discarded: f64,
}

/// PCA to two components with a deterministic sign convention: in each
/// component, the largest-magnitude loading is positive.
pub fn project_2d(states: &[Vec<f64>]) -> Result<Projection, EvalError> {
    if states.len() < 3 {
        return Err(EvalError::TooFewSamples {
            need: 3,
            got: states.len(),
        });
    }
    let n = states.len();
    let d = states[0].len();
    let mut mean = vec![0.0; d];
    for s in states {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x / n as f64;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for s in states {
        let c: Vec<f64> = s.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[i][j] += c[i] * c[j] / n as f64;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i][j] = cov[j][i];
        }
    }
    if cov.iter().enumerate().all(|(i, row)| row[i] < 1e-15) {
        return Err(EvalError::ZeroVariance);
    }
    let (eigenvalues, mut eigenvectors) = jacobi_eigen(&cov);
    for vec in eigenvectors.iter_mut().take(2) {
        let lead = vec
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite loadings"))
            .map(|(i, _)| i)
            .expect("nonempty eigenvector");
        if vec[lead] < 0.0 {
            vec.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let coords: Vec<(f64, f64)> = states
        .iter()
        .map(|s| {
            let c: Vec<f64> = s.iter().zip(&mean).map(|(x, m)| x - m).collect();
            let x = c.iter().zip(&eigenvectors[0]).map(|(a, b)| a * b).sum();
            let y = if eigenvectors.len() > 1 {
                c.iter().zip(&eigenvectors[1]).map(|(a, b)| a * b).sum()
            } else {
                0.0
            };
            (x, y)
        })
        .collect();
    let discarded = eigenvalues.iter().skip(2).sum();
    Ok(Projection {
        coords,
        eigenvalues,
        discarded,
    })
}

pub fn write_projection_csv(
    path: &Path,
    projection: &Projection,
    langs: &[String],
    variant: &str,
) -> Result<(), EvalError> {
    let mut out = String::from("x,y,lang,variant\n");
    for ((x, y), lang) in projection.coords.iter().zip(langs) {
        out.push_str(&format!("{x},{y},{lang},{variant}\n"));
    }
    std::fs::write(path, out).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Minimal static scatter of the projection, one color per language.
pub fn write_projection_svg(
    path: &Path,
    projection: &Projection,
    langs: &[String],
) -> Result<(), EvalError> {
    const SIZE: f64 = 480.0;
    const PALETTE: &[&str] = &[
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    ];
    let xs: Vec<f64> = projection.coords.iter().map(|c| c.0).collect();
    let ys: Vec<f64> = projection.coords.iter().map(|c| c.1).collect();
    let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (x0, x1, y0, y1) = (min(&xs), max(&xs), min(&ys), max(&ys));
    let scale = |v: f64, lo: f64, hi: f64| {
        if hi > lo {
            20.0 + (v - lo) / (hi - lo) * (SIZE - 40.0)
        } else {
            SIZE / 2.0
        }
    };
    let mut lang_order: Vec<&String> = langs.iter().collect();
    lang_order.sort();
    lang_order.dedup();
    let color = |lang: &str| {
        let idx = lang_order.iter().position(|l| *l == lang).unwrap_or(0);
        PALETTE[idx % PALETTE.len()]
    };
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\">\n"
    );
    for ((x, y), lang) in projection.coords.iter().zip(langs) {
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.6\"/>\n",
            scale(*x, x0, x1),
            SIZE - scale(*y, y0, y1),
            color(lang)
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}
