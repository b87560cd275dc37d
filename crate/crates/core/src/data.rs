//! Corpus ingestion, train/eval splitting, client partitioning and the
//! synthetic stress corpus.

use std::path::Path;

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, SplitMix64};

/// Subreddit groups of the Dreaddit corpus.
pub const DOMAINS: [&str; 5] = ["interpersonal conflict", "mental illness", "financial need", "ptsd", "social"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: u64,
    pub text: String,
    /// 0 = non-stressful, 1 = stressful.
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

/// Reads a CSV with at least `text` and `label` columns. An `id` column is
/// used when present (otherwise the 0-based row index), and a `domain` or
/// `subreddit` column fills [`Record::domain`]. Other columns are ignored.
pub fn load_corpus(path: &Path) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(file)
}

pub fn read_corpus<R: std::io::Read>(reader: R) -> Result<Vec<Record>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let text_col = column("text").ok_or_else(|| Error::Schema("text".into()))?;
    let label_col = column("label").ok_or_else(|| Error::Schema("label".into()))?;
    let id_col = column("id");
    let domain_col = column("domain").or_else(|| column("subreddit"));

    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row_no = row + 1;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let label = match field(label_col).trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Data(format!(
                    "row {row_no}: label {other:?} is not 0 or 1"
                )))
            }
        };
        let text = field(text_col);
        if text.trim().is_empty() {
            return Err(Error::Data(format!("row {row_no}: empty text")));
        }
        let id = match id_col.map(field) {
            Some(s) if !s.trim().is_empty() => s
                .trim()
                .parse::<u64>()
                .map_err(|_| Error::Data(format!("row {row_no}: id {s:?} is not an unsigned integer")))?,
            _ => row as u64,
        };
        let domain = domain_col
            .map(field)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        out.push(Record {
            id,
            text: text.to_string(),
            label,
            domain,
        });
    }
    Ok(out)
}

/// Writes records with columns `id,text,label,domain`.
pub fn write_corpus(records: &[Record], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["id", "text", "label", "domain"])?;
    for r in records {
        w.write_record([
            r.id.to_string().as_str(),
            r.text.as_str(),
            r.label.to_string().as_str(),
            r.domain.as_deref().unwrap_or(""),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn check_frac(eval_frac: f64) -> Result<()> {
    if eval_frac > 0.0 && eval_frac < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("eval_frac must lie in (0, 1), got {eval_frac}")))
    }
}

fn eval_size(n: usize, eval_frac: f64) -> usize {
    // ceil with slack for products like 0.7 * 10 = 7.000000000000001
    let raw = (n as f64 * eval_frac - 1e-9).ceil().max(1.0) as usize;
    raw.min(n - 1)
}

/// Seeded shuffle, then the first `⌈n·eval_frac⌉` records (at most n − 1)
/// become the eval set.
pub fn split_train_eval(records: &[Record], eval_frac: f64, seed: u64) -> Result<(Vec<Record>, Vec<Record>)> {
    check_frac(eval_frac)?;
    if records.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 records to split, got {}",
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    SplitMix64::new(seed).shuffle(&mut order);
    let n_eval = eval_size(records.len(), eval_frac);
    let eval = order[..n_eval].iter().map(|&i| records[i].clone()).collect();
    let train = order[n_eval..].iter().map(|&i| records[i].clone()).collect();
    Ok((train, eval))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionStrategy {
    Iid,
    /// Per-label client proportions drawn from a symmetric Dirichlet.
    LabelSkew { alpha: f64 },
    /// Client sizes proportional to `ratios`.
    QuantitySkew { ratios: Vec<f64> },
}

impl Default for PartitionStrategy {
    fn default() -> Self {
        PartitionStrategy::Iid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub clients: usize,
    pub strategy: PartitionStrategy,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("number of clients must be >= 1".into()));
        }
        match &self.strategy {
            PartitionStrategy::Iid => {}
            PartitionStrategy::LabelSkew { alpha } => {
                if !(*alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::Config(format!("label_skew alpha must be > 0, got {alpha}")));
                }
            }
            PartitionStrategy::QuantitySkew { ratios } => {
                if ratios.len() != self.clients {
                    return Err(Error::Config(format!(
                        "quantity_skew needs {} ratios, got {}",
                        self.clients,
                        ratios.len()
                    )));
                }
                if ratios.iter().any(|&r| !(r > 0.0)) {
                    return Err(Error::Config("quantity_skew ratios must be positive".into()));
                }
                let sum: f64 = ratios.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("quantity_skew ratios sum to {sum}, not 1")));
                }
            }
        }
        Ok(())
    }
}

/// Integer sizes summing to `n`, each within one of `weights[i] * n`.
/// Leftover units go to the largest fractional parts, lower index first on
/// ties.
pub fn largest_remainder(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

fn dirichlet(alpha: f64, k: usize, rng: &mut SplitMix64) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|g| g / sum).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

/// Splits `records` into `spec.clients` disjoint shards whose union is the
/// input. Each shard keeps the input order of its records. With one client
/// the input is returned unchanged.
pub fn partition_clients(records: &[Record], spec: &PartitionSpec) -> Result<Vec<Vec<Record>>> {
    spec.validate()?;
    let k = spec.clients;
    if records.len() < k {
        return Err(Error::Data(format!(
            "{} records cannot be spread over {k} clients",
            records.len()
        )));
    }
    if k == 1 {
        return Ok(vec![records.to_vec()]);
    }
    let mut rng = SplitMix64::new(derive_seed(spec.seed, &[stream::PARTITION]));
    let mut assignment: Vec<Vec<usize>> = vec![Vec::new(); k];
    match &spec.strategy {
        PartitionStrategy::Iid => {
            let mut order: Vec<usize> = (0..records.len()).collect();
            rng.shuffle(&mut order);
            for (pos, idx) in order.into_iter().enumerate() {
                assignment[pos % k].push(idx);
            }
        }
        PartitionStrategy::LabelSkew { alpha } => {
            let max_label = records.iter().map(|r| r.label).max().unwrap_or(0);
            for label in 0..=max_label {
                let mut members: Vec<usize> = (0..records.len()).filter(|&i| records[i].label == label).collect();
                rng.shuffle(&mut members);
                let props = dirichlet(*alpha, k, &mut rng);
                let sizes = largest_remainder(&props, members.len());
                let mut start = 0;
                for (client, size) in sizes.into_iter().enumerate() {
                    assignment[client].extend_from_slice(&members[start..start + size]);
                    start += size;
                }
            }
        }
        PartitionStrategy::QuantitySkew { ratios } => {
            let mut order: Vec<usize> = (0..records.len()).collect();
            rng.shuffle(&mut order);
            let sizes = largest_remainder(ratios, records.len());
            let mut start = 0;
            for (client, size) in sizes.into_iter().enumerate() {
                assignment[client].extend_from_slice(&order[start..start + size]);
                start += size;
            }
        }
    }
    Ok(assignment
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            idx.into_iter().map(|i| records[i].clone()).collect()
        })
        .collect())
}

/// One client's local data `D_k`, split into train and eval.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub train: Vec<Record>,
    pub eval: Vec<Record>,
}

impl ClientShard {
    /// Splits a client's records with a seed derived from `(seed, client_id)`.
    /// Shards with fewer than two records keep everything for training.
    pub fn from_records(client_id: usize, records: Vec<Record>, eval_frac: f64, seed: u64) -> Result<Self> {
        check_frac(eval_frac)?;
        if records.len() < 2 {
            return Ok(Self {
                client_id,
                train: records,
                eval: Vec::new(),
            });
        }
        let split_seed = derive_seed(seed, &[stream::CLIENT_SPLIT, client_id as u64]);
        let (train, eval) = split_train_eval(&records, eval_frac, split_seed)?;
        Ok(Self { client_id, train, eval })
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.eval.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const STRESS_WORDS: [&str; 12] = [
    "anxious", "stressed", "panic", "overwhelmed", "deadline", "worried", "afraid", "exhausted",
    "hopeless", "evicted", "debt", "nightmare",
];

const CALM_WORDS: [&str; 12] = [
    "relaxed", "grateful", "calm", "happy", "peaceful", "enjoyed", "vacation", "laughing", "sunny",
    "rested", "cozy", "cheerful",
];

const FILLER_WORDS: [&str; 40] = [
    "the", "a", "i", "my", "and", "to", "was", "it", "today", "really", "just", "so", "with", "about",
    "that", "feel", "week", "then", "we", "have", "been", "this", "of", "for", "on", "at", "me",
    "when", "after", "work", "home", "family", "time", "people", "day", "thing", "still", "there",
    "some", "like",
];

/// Probability that a word comes from the record's own class pool, from the
/// other class pool, or (remainder) from the shared filler pool.
pub const SYNTH_OWN_POOL: f64 = 0.45;
pub const SYNTH_OTHER_POOL: f64 = 0.05;
pub const SYNTH_MIN_WORDS: usize = 10;
pub const SYNTH_MAX_WORDS: usize = 16;

/// Balanced two-class corpus. Labels alternate 0, 1, 0, ... and each text
/// draws its words mostly from the keyword pool of its class.
pub fn synth_corpus(n: usize, seed: u64) -> Result<Vec<Record>> {
    if n < 2 {
        return Err(Error::Config(format!("synthetic corpus needs n >= 2, got {n}")));
    }
    let mut rng = SplitMix64::new(derive_seed(seed, &[stream::SYNTH]));
    let records = (0..n)
        .map(|i| {
            let label = i % 2;
            let (own, other): (&[&str], &[&str]) = if label == 1 {
                (&STRESS_WORDS, &CALM_WORDS)
            } else {
                (&CALM_WORDS, &STRESS_WORDS)
            };
            let len = SYNTH_MIN_WORDS + rng.below(SYNTH_MAX_WORDS - SYNTH_MIN_WORDS + 1);
            let words: Vec<&str> = (0..len)
                .map(|_| {
                    let u = rng.next_f64();
                    let pool: &[&str] = if u < SYNTH_OWN_POOL {
                        own
                    } else if u < SYNTH_OWN_POOL + SYNTH_OTHER_POOL {
                        other
                    } else {
                        &FILLER_WORDS
                    };
                    pool[rng.below(pool.len())]
                })
                .collect();
            Record {
                id: i as u64,
                text: format!("{}.", words.join(" ")),
                label,
                domain: None,
            }
        })
        .collect();
    Ok(records)
}

/// Keyword pools of the synthetic corpus as (non-stress, stress).
pub fn synth_keyword_pools() -> (&'static [&'static str], &'static [&'static str]) {
    (&CALM_WORDS, &STRESS_WORDS)
}
