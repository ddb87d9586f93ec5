//! HDP topic model fitted by Chinese-restaurant-franchise Gibbs sampling.
//!
//! Words sit at tables inside their document; each table serves one dish
//! (topic) from a menu shared by all documents. The topic distributions are
//! integrated out against a symmetric Dirichlet(eta) base measure, so a dish
//! is represented only by its term counts `n_kv`.
//!
//! One sweep resamples the table of every word and then the dish of every
//! table. All conditional weights are formed in log space and normalized with
//! log-sum-exp.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::BowDocument;

#[derive(Debug, Error, PartialEq)]
pub enum HdpError {
    #[error("hyperparameters must be finite and > 0 (gamma {gamma}, alpha0 {alpha0}, eta {eta})")]
    BadHyperparams { gamma: f64, alpha0: f64, eta: f64 },
    #[error("sub-corpus has no words")]
    EmptyCorpus,
    #[error("document {doc} uses term {term} outside the vocabulary of {vocab_size}")]
    TermOutOfRange { doc: String, term: u32, vocab_size: usize },
    #[error("non-finite conditional weight while resampling {0}")]
    NonFinite(&'static str),
    #[error("need sweeps > burn_in (sweeps {sweeps}, burn_in {burn_in})")]
    BadSchedule { sweeps: usize, burn_in: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HdpHyperparams {
    /// Corpus-level concentration.
    pub gamma: f64,
    /// Document-level concentration.
    pub alpha0: f64,
    /// Symmetric Dirichlet parameter of the base measure over terms.
    pub eta: f64,
}

impl Default for HdpHyperparams {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            alpha0: 1.0,
            eta: 0.5,
        }
    }
}

impl HdpHyperparams {
    pub fn validate(&self) -> Result<(), HdpError> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if ok(self.gamma) && ok(self.alpha0) && ok(self.eta) {
            Ok(())
        } else {
            Err(HdpError::BadHyperparams {
                gamma: self.gamma,
                alpha0: self.alpha0,
                eta: self.eta,
            })
        }
    }
}

/// `ln(x (x+1) ... (x+n-1))`, the log rising factorial.
pub fn ln_rising(x: f64, n: u32) -> f64 {
    (0..n).map(|i| (x + i as f64).ln()).sum()
}

/// Draws an index with probability proportional to `exp(logw[i])`.
/// `logw` is overwritten with unnormalized linear weights.
fn sample_log(rng: &mut ChaCha8Rng, logw: &mut [f64], what: &'static str) -> Result<usize, HdpError> {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(HdpError::NonFinite(what));
    }
    let mut total = 0.0;
    for w in logw.iter_mut() {
        *w = (*w - max).exp();
        total += *w;
    }
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in logw.iter().enumerate() {
        if u < *w {
            return Ok(i);
        }
        u -= w;
    }
    Ok(logw.iter().rposition(|&w| w > 0.0).unwrap_or(0))
}

/// Reusable buffers and a cache of `ln(n)` for small integers.
#[derive(Debug, Clone, Default)]
struct Scratch {
    ln_int: Vec<f64>,
    dish_ids: Vec<u32>,
    dish_lnf: Vec<f64>,
    mix: Vec<f64>,
    table_ids: Vec<u32>,
    logw: Vec<f64>,
}

impl Scratch {
    fn ln(&mut self, n: u32) -> f64 {
        let n = n as usize;
        if n >= self.ln_int.len() {
            let from = self.ln_int.len();
            self.ln_int.extend((from..=n.max(2 * from).max(64)).map(|i| (i as f64).ln()));
        }
        self.ln_int[n]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Table {
    dish: u32,
    count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Dish {
    /// Number of tables serving this dish (m_k).
    tables: u32,
    /// Words assigned to this dish (n_k).
    total: u32,
    /// Term counts n_kv, dense over the vocabulary.
    counts: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct CrfState {
    vocab_size: usize,
    doc_ids: Vec<String>,
    words: Vec<Vec<u32>>,
    /// Table id of every word.
    seating: Vec<Vec<u32>>,
    tables: Vec<BTreeMap<u32, Table>>,
    next_table: Vec<u32>,
    dishes: BTreeMap<u32, Dish>,
    next_dish: u32,
    total_tables: u32,
    seed: u64,
    sweeps_done: usize,
    rng: ChaCha8Rng,
    scratch: Scratch,
}

impl PartialEq for CrfState {
    fn eq(&self, other: &Self) -> bool {
        self.vocab_size == other.vocab_size
            && self.doc_ids == other.doc_ids
            && self.words == other.words
            && self.seating == other.seating
            && self.tables == other.tables
            && self.next_table == other.next_table
            && self.dishes == other.dishes
            && self.next_dish == other.next_dish
            && self.total_tables == other.total_tables
            && self.seed == other.seed
            && self.sweeps_done == other.sweeps_done
            && self.rng == other.rng
    }
}

impl CrfState {
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn sweeps_done(&self) -> usize {
        self.sweeps_done
    }

    pub fn num_docs(&self) -> usize {
        self.words.len()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn words(&self, doc: usize) -> &[u32] {
        &self.words[doc]
    }

    /// Table id of each word of `doc`.
    pub fn seating(&self, doc: usize) -> &[u32] {
        &self.seating[doc]
    }

    pub fn table_dish(&self, doc: usize, table: u32) -> Option<u32> {
        self.tables[doc].get(&table).map(|t| t.dish)
    }

    pub fn num_tables(&self) -> u32 {
        self.total_tables
    }

    pub fn num_dishes(&self) -> usize {
        self.dishes.len()
    }

    pub fn dish_ids(&self) -> Vec<u32> {
        self.dishes.keys().copied().collect()
    }

    /// Words assigned to `dish`.
    pub fn dish_mass(&self, dish: u32) -> u32 {
        self.dishes.get(&dish).map_or(0, |d| d.total)
    }

    pub fn dish_counts(&self, dish: u32) -> Option<&[u32]> {
        self.dishes.get(&dish).map(|d| d.counts.as_slice())
    }

    /// Dish of every word of `doc`.
    pub fn word_dishes(&self, doc: usize) -> Vec<u32> {
        self.seating[doc]
            .iter()
            .map(|t| self.tables[doc][t].dish)
            .collect()
    }

    fn remove_word(&mut self, doc: usize, i: usize) {
        let term = self.words[doc][i] as usize;
        let tid = self.seating[doc][i];
        let table = self.tables[doc].get_mut(&tid).expect("seated word has a table");
        table.count -= 1;
        let (dish_id, now_empty) = (table.dish, table.count == 0);
        let dish = self.dishes.get_mut(&dish_id).expect("live table has a dish");
        dish.counts[term] -= 1;
        dish.total -= 1;
        if now_empty {
            self.tables[doc].remove(&tid);
            self.total_tables -= 1;
            dish.tables -= 1;
            if dish.tables == 0 {
                debug_assert_eq!(dish.total, 0);
                self.dishes.remove(&dish_id);
            }
        }
    }

    /// Seats word `i` of `doc` by sampling from its CRF conditional.
    fn seat_word(&mut self, doc: usize, i: usize, hyper: &HdpHyperparams) -> Result<(), HdpError> {
        let term = self.words[doc][i] as usize;
        let v_eta = self.vocab_size as f64 * hyper.eta;
        let mut s = std::mem::take(&mut self.scratch);
        s.dish_ids.clear();
        s.dish_lnf.clear();
        s.mix.clear();

        // Prior predictive of a new table: mix over existing dishes by table
        // counts and a fresh dish by gamma.
        for (&k, d) in &self.dishes {
            let lnf = (d.counts[term] as f64 + hyper.eta).ln() - (d.total as f64 + v_eta).ln();
            s.dish_ids.push(k);
            s.dish_lnf.push(lnf);
            let ln_m = s.ln(d.tables);
            s.mix.push(ln_m + lnf);
        }
        s.mix.push(hyper.gamma.ln() - (self.vocab_size as f64).ln());
        let ln_new_table = log_sum_exp(&s.mix) - (self.total_tables as f64 + hyper.gamma).ln();

        s.table_ids.clear();
        s.logw.clear();
        for (&tid, t) in &self.tables[doc] {
            let k = s.dish_ids.binary_search(&t.dish).expect("live dish");
            let ln_n = s.ln(t.count);
            s.table_ids.push(tid);
            s.logw.push(ln_n + s.dish_lnf[k]);
        }
        s.logw.push(hyper.alpha0.ln() + ln_new_table);
        let picked = sample_log(&mut self.rng, &mut s.logw, "word table").and_then(|pick| {
            if pick < s.table_ids.len() {
                Ok(Ok(s.table_ids[pick]))
            } else {
                // mix holds exactly the dish weights for a fresh table.
                let k = sample_log(&mut self.rng, &mut s.mix, "new table dish")?;
                Ok(Err(s.dish_ids.get(k).copied()))
            }
        });
        self.scratch = s;
        let tid = match picked? {
            Ok(tid) => tid,
            Err(dish) => {
                let dish = match dish {
                    Some(k) => k,
                    None => self.new_dish(),
                };
                self.open_table(doc, dish)
            }
        };

        self.seating[doc][i] = tid;
        let table = self.tables[doc].get_mut(&tid).unwrap();
        table.count += 1;
        let dish = self.dishes.get_mut(&table.dish).unwrap();
        dish.counts[term] += 1;
        dish.total += 1;
        Ok(())
    }

    fn new_dish(&mut self) -> u32 {
        let id = self.next_dish;
        self.next_dish += 1;
        self.dishes.insert(
            id,
            Dish {
                tables: 0,
                total: 0,
                counts: vec![0; self.vocab_size],
            },
        );
        id
    }

    fn open_table(&mut self, doc: usize, dish: u32) -> u32 {
        let id = self.next_table[doc];
        self.next_table[doc] += 1;
        self.tables[doc].insert(id, Table { dish, count: 0 });
        self.dishes.get_mut(&dish).unwrap().tables += 1;
        self.total_tables += 1;
        id
    }

    /// Term counts of every table of `doc`.
    fn table_term_counts(&self, doc: usize) -> BTreeMap<u32, BTreeMap<u32, u32>> {
        let mut out: BTreeMap<u32, BTreeMap<u32, u32>> = BTreeMap::new();
        for (&term, &tid) in self.words[doc].iter().zip(&self.seating[doc]) {
            *out.entry(tid).or_default().entry(term).or_insert(0) += 1;
        }
        out
    }

    fn resample_table_dish(
        &mut self,
        doc: usize,
        tid: u32,
        terms: &BTreeMap<u32, u32>,
        hyper: &HdpHyperparams,
    ) -> Result<(), HdpError> {
        let table = self.tables[doc][&tid].clone();
        let n = table.count;
        {
            let dish = self.dishes.get_mut(&table.dish).unwrap();
            for (&v, &c) in terms {
                dish.counts[v as usize] -= c;
            }
            dish.total -= n;
            dish.tables -= 1;
            if dish.tables == 0 {
                debug_assert_eq!(dish.total, 0);
                self.dishes.remove(&table.dish);
            }
        }
        self.total_tables -= 1;

        let v_eta = self.vocab_size as f64 * hyper.eta;
        let ln_f = |counts: Option<&Dish>| -> f64 {
            let (total, num) = match counts {
                Some(d) => (
                    d.total as f64,
                    terms
                        .iter()
                        .map(|(&v, &c)| ln_rising(d.counts[v as usize] as f64 + hyper.eta, c))
                        .sum::<f64>(),
                ),
                None => (
                    0.0,
                    terms.values().map(|&c| ln_rising(hyper.eta, c)).sum::<f64>(),
                ),
            };
            num - ln_rising(total + v_eta, n)
        };

        let mut s = std::mem::take(&mut self.scratch);
        s.dish_ids.clear();
        s.logw.clear();
        for (&k, d) in &self.dishes {
            s.dish_ids.push(k);
            let ln_m = s.ln(d.tables);
            s.logw.push(ln_m + ln_f(Some(d)));
        }
        s.logw.push(hyper.gamma.ln() + ln_f(None));
        let pick = sample_log(&mut self.rng, &mut s.logw, "table dish");
        let existing = pick.as_ref().ok().and_then(|&p| s.dish_ids.get(p).copied());
        self.scratch = s;
        pick?;
        let new_dish = match existing {
            Some(k) => k,
            None => self.new_dish(),
        };

        self.tables[doc].get_mut(&tid).unwrap().dish = new_dish;
        self.total_tables += 1;
        let dish = self.dishes.get_mut(&new_dish).unwrap();
        dish.tables += 1;
        dish.total += n;
        for (&v, &c) in terms {
            dish.counts[v as usize] += c;
        }
        Ok(())
    }

    /// One full Gibbs sweep: every word's table, then every table's dish.
    pub fn sweep(&mut self, hyper: &HdpHyperparams) -> Result<(), HdpError> {
        hyper.validate()?;
        for doc in 0..self.words.len() {
            for i in 0..self.words[doc].len() {
                self.remove_word(doc, i);
                self.seat_word(doc, i, hyper)?;
            }
        }
        for doc in 0..self.words.len() {
            for (tid, terms) in self.table_term_counts(doc) {
                self.resample_table_dish(doc, tid, &terms, hyper)?;
            }
        }
        self.sweeps_done += 1;
        Ok(())
    }

    /// Log joint probability of words, seating and dish assignment with the
    /// topic distributions integrated out.
    pub fn log_joint(&self, hyper: &HdpHyperparams) -> f64 {
        let ln_fact = |n: u32| ln_rising(1.0, n.saturating_sub(1));
        let mut lp = 0.0;
        for (doc, tables) in self.tables.iter().enumerate() {
            lp += tables.len() as f64 * hyper.alpha0.ln();
            lp += tables.values().map(|t| ln_fact(t.count)).sum::<f64>();
            lp -= ln_rising(hyper.alpha0, self.words[doc].len() as u32);
        }
        lp += self.dishes.len() as f64 * hyper.gamma.ln();
        lp += self.dishes.values().map(|d| ln_fact(d.tables)).sum::<f64>();
        lp -= ln_rising(hyper.gamma, self.total_tables);
        let v_eta = self.vocab_size as f64 * hyper.eta;
        for d in self.dishes.values() {
            lp += d
                .counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| ln_rising(hyper.eta, c))
                .sum::<f64>();
            lp -= ln_rising(v_eta, d.total);
        }
        lp
    }

    /// Recomputes every count from the word-level assignment and reports each
    /// disagreement with the stored bookkeeping.
    pub fn audit(&self) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        let mut dish_tables: BTreeMap<u32, u32> = BTreeMap::new();
        let mut dish_counts: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        let mut total_tables = 0u32;

        for (doc, words) in self.words.iter().enumerate() {
            let mut table_counts: BTreeMap<u32, u32> = BTreeMap::new();
            for (i, (&term, &tid)) in words.iter().zip(&self.seating[doc]).enumerate() {
                let Some(table) = self.tables[doc].get(&tid) else {
                    problems.push(format!("doc {doc} word {i}: table {tid} is not live"));
                    continue;
                };
                *table_counts.entry(tid).or_insert(0) += 1;
                dish_counts
                    .entry(table.dish)
                    .or_insert_with(|| vec![0; self.vocab_size])[term as usize] += 1;
            }
            let seated: u32 = self.tables[doc].values().map(|t| t.count).sum();
            if seated as usize != words.len() {
                problems.push(format!("doc {doc}: tables hold {seated} words, N_j = {}", words.len()));
            }
            for (tid, t) in &self.tables[doc] {
                if t.count == 0 {
                    problems.push(format!("doc {doc}: table {tid} is empty"));
                }
                if table_counts.get(tid).copied().unwrap_or(0) != t.count {
                    problems.push(format!("doc {doc}: table {tid} count {} disagrees with seating", t.count));
                }
                if !self.dishes.contains_key(&t.dish) {
                    problems.push(format!("doc {doc}: table {tid} serves dead dish {}", t.dish));
                }
                if *tid >= self.next_table[doc] {
                    problems.push(format!("doc {doc}: table id {tid} not yet issued"));
                }
                *dish_tables.entry(t.dish).or_insert(0) += 1;
                total_tables += 1;
            }
        }
        if total_tables != self.total_tables {
            problems.push(format!("table total {} != {}", self.total_tables, total_tables));
        }
        for (k, d) in &self.dishes {
            if d.tables == 0 {
                problems.push(format!("dish {k} has no tables"));
            }
            if dish_tables.get(k).copied().unwrap_or(0) != d.tables {
                problems.push(format!("dish {k}: m_k {} disagrees with tables", d.tables));
            }
            let recount = dish_counts.get(k).cloned().unwrap_or_else(|| vec![0; self.vocab_size]);
            if recount != d.counts {
                problems.push(format!("dish {k}: n_kv disagrees with seated words"));
            }
            if d.counts.iter().sum::<u32>() != d.total {
                problems.push(format!("dish {k}: n_k {} != sum of n_kv", d.total));
            }
            if *k >= self.next_dish {
                problems.push(format!("dish id {k} not yet issued"));
            }
        }
        let words: usize = self.words.iter().map(Vec::len).sum();
        let assigned: u32 = self.dishes.values().map(|d| d.total).sum();
        if assigned as usize != words {
            problems.push(format!("dishes hold {assigned} words, corpus has {words}"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }

    /// Share of the document's words assigned to each listed dish,
    /// renormalized over those dishes. `None` if none of its words are.
    pub fn doc_mixture(&self, doc: usize, dishes: &[u32]) -> Option<BTreeMap<u32, f64>> {
        let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
        for k in self.word_dishes(doc) {
            if dishes.contains(&k) {
                *counts.entry(k).or_insert(0) += 1;
            }
        }
        let total: u32 = counts.values().sum();
        (total > 0).then(|| {
            counts
                .into_iter()
                .map(|(k, c)| (k, c as f64 / total as f64))
                .collect()
        })
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Seats every word by sequential draws from the CRF conditional given the
/// words seated before it.
pub fn init_state(
    docs: &[BowDocument],
    vocab_size: usize,
    hyper: &HdpHyperparams,
    seed: u64,
) -> Result<CrfState, HdpError> {
    hyper.validate()?;
    for d in docs {
        if let Some((&term, _)) = d.counts.iter().find(|(&v, _)| v as usize >= vocab_size) {
            return Err(HdpError::TermOutOfRange {
                doc: d.doc_id.clone(),
                term,
                vocab_size,
            });
        }
    }
    let docs: Vec<&BowDocument> = docs.iter().filter(|d| d.n_words > 0).collect();
    if docs.is_empty() || vocab_size == 0 {
        return Err(HdpError::EmptyCorpus);
    }
    let words: Vec<Vec<u32>> = docs.iter().map(|d| d.words()).collect();
    let mut state = CrfState {
        vocab_size,
        doc_ids: docs.iter().map(|d| d.doc_id.clone()).collect(),
        seating: words.iter().map(|w| vec![u32::MAX; w.len()]).collect(),
        tables: vec![BTreeMap::new(); words.len()],
        next_table: vec![0; words.len()],
        words,
        dishes: BTreeMap::new(),
        next_dish: 0,
        total_tables: 0,
        seed,
        sweeps_done: 0,
        rng: ChaCha8Rng::seed_from_u64(seed),
        scratch: Scratch::default(),
    };
    for doc in 0..state.words.len() {
        for i in 0..state.words[doc].len() {
            state.seat_word(doc, i, hyper)?;
        }
    }
    Ok(state)
}

/// Functional form of [`CrfState::sweep`].
pub fn gibbs_sweep(mut state: CrfState, hyper: &HdpHyperparams) -> Result<CrfState, HdpError> {
    state.sweep(hyper)?;
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainSchedule {
    pub sweeps: usize,
    pub burn_in: usize,
}

impl Default for ChainSchedule {
    fn default() -> Self {
        Self {
            sweeps: 500,
            burn_in: 300,
        }
    }
}

impl ChainSchedule {
    pub fn validate(&self) -> Result<(), HdpError> {
        if self.sweeps > self.burn_in {
            Ok(())
        } else {
            Err(HdpError::BadSchedule {
                sweeps: self.sweeps,
                burn_in: self.burn_in,
            })
        }
    }
}

/// Runs `sweeps` sweeps from a fresh state and returns the final sample with
/// the log joint probability after each sweep.
pub fn run_chain(
    docs: &[BowDocument],
    vocab_size: usize,
    hyper: &HdpHyperparams,
    seed: u64,
    schedule: ChainSchedule,
) -> Result<(CrfState, Vec<f64>), HdpError> {
    schedule.validate()?;
    let mut state = init_state(docs, vocab_size, hyper, seed)?;
    let mut trace = Vec::with_capacity(schedule.sweeps);
    for _ in 0..schedule.sweeps {
        state.sweep(hyper)?;
        let lp = state.log_joint(hyper);
        if !lp.is_finite() {
            return Err(HdpError::NonFinite("log joint"));
        }
        trace.push(lp);
    }
    Ok((state, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topic {
    pub topic_id: u32,
    pub mass: u32,
    pub phi: Vec<f64>,
}

impl Topic {
    /// Indices of the `n` most probable terms, ties by index.
    pub fn top_terms(&self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.phi.len()).collect();
        idx.sort_by(|&a, &b| self.phi[b].total_cmp(&self.phi[a]).then(a.cmp(&b)));
        idx.truncate(n);
        idx
    }
}

/// Posterior-mean topics `(n_kv + eta) / (n_k + V eta)` for every dish with at
/// least `min_mass` words, ordered by descending mass then dish id.
pub fn extract_topics(state: &CrfState, hyper: &HdpHyperparams, min_mass: u32) -> Vec<Topic> {
    let v_eta = state.vocab_size as f64 * hyper.eta;
    let mut topics: Vec<Topic> = state
        .dishes
        .iter()
        .filter(|(_, d)| d.total >= min_mass.max(1))
        .map(|(&k, d)| {
            let denom = d.total as f64 + v_eta;
            Topic {
                topic_id: k,
                mass: d.total,
                phi: d.counts.iter().map(|&c| (c as f64 + hyper.eta) / denom).collect(),
            }
        })
        .collect();
    topics.sort_by(|a, b| b.mass.cmp(&a.mass).then(a.topic_id.cmp(&b.topic_id)));
    topics
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DishRecord {
    pub dish_id: u32,
    pub mass: u32,
    pub tables: u32,
    /// Sparse `(term, count)` rows of n_kv.
    pub counts: Vec<(u32, u32)>,
}

/// Per-epoch model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochCheckpoint {
    pub epoch_index: usize,
    pub hyper: HdpHyperparams,
    pub seed: u64,
    pub sweeps: usize,
    pub burn_in: usize,
    pub min_mass: u32,
    pub vocab_size: usize,
    pub num_docs: usize,
    pub final_log_joint: f64,
    pub dishes: Vec<DishRecord>,
    pub topics: Vec<Topic>,
    /// Doc id -> topic id -> share of the document's words.
    pub doc_mixtures: BTreeMap<String, BTreeMap<u32, f64>>,
}

impl EpochCheckpoint {
    pub fn from_state(
        epoch_index: usize,
        state: &CrfState,
        hyper: &HdpHyperparams,
        schedule: ChainSchedule,
        min_mass: u32,
    ) -> Self {
        let mut dishes: Vec<DishRecord> = state
            .dishes
            .iter()
            .map(|(&k, d)| DishRecord {
                dish_id: k,
                mass: d.total,
                tables: d.tables,
                counts: d
                    .counts
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c > 0)
                    .map(|(v, &c)| (v as u32, c))
                    .collect(),
            })
            .collect();
        dishes.sort_by(|a, b| b.mass.cmp(&a.mass).then(a.dish_id.cmp(&b.dish_id)));
        let topics = extract_topics(state, hyper, min_mass);
        let emitted: Vec<u32> = topics.iter().map(|t| t.topic_id).collect();
        let doc_mixtures = (0..state.num_docs())
            .filter_map(|j| state.doc_mixture(j, &emitted).map(|m| (state.doc_ids[j].clone(), m)))
            .collect();
        Self {
            epoch_index,
            hyper: *hyper,
            seed: state.seed,
            sweeps: schedule.sweeps,
            burn_in: schedule.burn_in,
            min_mass,
            vocab_size: state.vocab_size,
            num_docs: state.num_docs(),
            final_log_joint: state.log_joint(hyper),
            dishes,
            topics,
            doc_mixtures,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bow(id: &str, words: &[u32]) -> BowDocument {
        let mut counts = BTreeMap::new();
        for &w in words {
            *counts.entry(w).or_insert(0) += 1;
        }
        BowDocument::from_counts(id, counts)
    }

    fn ones() -> HdpHyperparams {
        HdpHyperparams {
            gamma: 1.0,
            alpha0: 1.0,
            eta: 1.0,
        }
    }

    #[test]
    fn single_word_forced_configuration() {
        let s = init_state(&[bow("d", &[0])], 3, &ones(), 7).unwrap();
        assert_eq!(s.num_tables(), 1);
        assert_eq!(s.num_dishes(), 1);
        let k = s.dish_ids()[0];
        assert_eq!(s.dish_counts(k).unwrap(), &[1, 0, 0]);
        s.audit().unwrap();
    }

    #[test]
    fn init_is_deterministic() {
        let docs = [bow("a", &[0, 1, 1, 2]), bow("b", &[2, 2, 3])];
        let a = init_state(&docs, 4, &HdpHyperparams::default(), 11).unwrap();
        let b = init_state(&docs, 4, &HdpHyperparams::default(), 11).unwrap();
        assert_eq!(a, b);
        a.audit().unwrap();
    }

    #[test]
    fn init_errors() {
        assert_eq!(init_state(&[], 3, &ones(), 0), Err(HdpError::EmptyCorpus));
        assert_eq!(
            init_state(&[bow("a", &[])], 3, &ones(), 0),
            Err(HdpError::EmptyCorpus)
        );
        assert!(matches!(
            init_state(&[bow("a", &[5])], 3, &ones(), 0),
            Err(HdpError::TermOutOfRange { term: 5, .. })
        ));
        let bad = HdpHyperparams { gamma: 0.0, ..ones() };
        assert!(matches!(init_state(&[bow("a", &[0])], 3, &bad, 0), Err(HdpError::BadHyperparams { .. })));
    }

    #[test]
    fn ids_are_never_reused() {
        let docs = [bow("a", &[0, 0, 1, 1, 2, 2]), bow("b", &[3, 3, 4, 4])];
        let hyper = HdpHyperparams { gamma: 3.0, alpha0: 3.0, eta: 0.5 };
        let mut s = init_state(&docs, 5, &hyper, 3).unwrap();
        let mut retired = std::collections::BTreeSet::new();
        let mut live: std::collections::BTreeSet<u32> = s.dish_ids().into_iter().collect();
        for _ in 0..200 {
            s.sweep(&hyper).unwrap();
            s.audit().unwrap();
            let now: std::collections::BTreeSet<u32> = s.dish_ids().into_iter().collect();
            for k in live.difference(&now) {
                retired.insert(*k);
            }
            assert!(now.is_disjoint(&retired));
            live = now;
        }
        assert!(!retired.is_empty(), "dishes should have been created and removed");
    }

    #[test]
    fn two_word_prior_same_table_half() {
        // V = 1 makes every likelihood identical, so seating follows the CRP:
        // P(same table) = 1 / (1 + alpha0) = 1/2.
        let hyper = ones();
        let mut s = init_state(&[bow("d", &[0, 0])], 1, &hyper, 5).unwrap();
        let n = 40_000;
        let mut same = 0;
        for _ in 0..n {
            s.sweep(&hyper).unwrap();
            if s.num_tables() == 1 {
                same += 1;
            }
        }
        let p = same as f64 / n as f64;
        assert!((p - 0.5).abs() < 0.02, "p = {p}");
    }

    #[test]
    fn small_eta_keeps_one_topic() {
        // 30 copies of one term. With small eta an existing dish predicts the
        // term with probability ~1 versus 1/V for a fresh dish.
        let docs: Vec<BowDocument> = (0..3).map(|i| bow(&format!("d{i}"), &[0; 10])).collect();
        let frac_single = |eta: f64| {
            let hyper = HdpHyperparams { gamma: 1.0, alpha0: 1.0, eta };
            let mut s = init_state(&docs, 50, &hyper, 9).unwrap();
            let sweeps = 2000;
            let mut single = 0;
            for _ in 0..sweeps {
                s.sweep(&hyper).unwrap();
                if s.num_dishes() == 1 {
                    single += 1;
                }
            }
            single as f64 / sweeps as f64
        };
        let sharp = frac_single(0.01);
        let flat = frac_single(10.0);
        assert!(sharp > 0.95, "eta=0.01: {sharp}");
        assert!(sharp > flat, "eta=0.01: {sharp}, eta=10: {flat}");
    }

    #[test]
    fn log_joint_matches_single_word_closed_form() {
        // One word: p = 1/V.
        let s = init_state(&[bow("d", &[1])], 4, &ones(), 1).unwrap();
        assert!((s.log_joint(&ones()) - (0.25f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn chain_schedule_and_determinism() {
        let docs = [bow("a", &[0, 1, 1, 2]), bow("b", &[2, 2, 3])];
        let h = HdpHyperparams::default();
        let (s1, t1) = run_chain(&docs, 4, &h, 42, ChainSchedule { sweeps: 1, burn_in: 0 }).unwrap();
        let expected = gibbs_sweep(init_state(&docs, 4, &h, 42).unwrap(), &h).unwrap();
        assert_eq!(s1, expected);
        assert_eq!(t1.len(), 1);

        let (a, ta) = run_chain(&docs, 4, &h, 42, ChainSchedule { sweeps: 30, burn_in: 10 }).unwrap();
        let (b, tb) = run_chain(&docs, 4, &h, 42, ChainSchedule { sweeps: 30, burn_in: 10 }).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(ta.len(), 30);
        assert!(ta.iter().all(|x| x.is_finite()));

        assert_eq!(
            run_chain(&docs, 4, &h, 42, ChainSchedule { sweeps: 5, burn_in: 5 }).unwrap_err(),
            HdpError::BadSchedule { sweeps: 5, burn_in: 5 }
        );
    }

    #[test]
    fn posterior_mean_topic() {
        // One document of four words over V = 2: counts (3, 1), eta = 1.
        let s = init_state(&[bow("d", &[0, 0, 0, 1])], 2, &ones(), 0).unwrap();
        let all_one_dish = s.num_dishes() == 1;
        let topics = extract_topics(&s, &ones(), 0);
        assert_eq!(topics.len(), s.num_dishes());
        if all_one_dish {
            assert!((topics[0].phi[0] - 4.0 / 6.0).abs() < 1e-15);
            assert!((topics[0].phi[1] - 2.0 / 6.0).abs() < 1e-15);
        }
        for t in &topics {
            assert!((t.phi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(t.mass >= 1);
        }
        assert!(extract_topics(&s, &ones(), 5).is_empty());
    }

    #[test]
    fn posterior_mean_formula_on_forced_dish() {
        // Find a seed whose initial state puts (3, 1) in one dish.
        let docs = [bow("d", &[0, 0, 0, 1])];
        let s = (0..200)
            .map(|seed| init_state(&docs, 2, &ones(), seed).unwrap())
            .find(|s| s.num_dishes() == 1)
            .expect("some seed seats everything on one dish");
        let t = &extract_topics(&s, &ones(), 0)[0];
        assert_eq!(t.mass, 4);
        assert!((t.phi[0] - 4.0 / 6.0).abs() < 1e-15);
        assert!((t.phi[1] - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_orders_dishes_by_mass() {
        let docs = [bow("a", &[0, 0, 0, 1, 1, 2]), bow("b", &[3, 3, 3, 3])];
        let h = HdpHyperparams::default();
        let sched = ChainSchedule { sweeps: 20, burn_in: 5 };
        let (s, _) = run_chain(&docs, 4, &h, 1, sched).unwrap();
        let cp = EpochCheckpoint::from_state(0, &s, &h, sched, 0);
        assert!(cp.dishes.windows(2).all(|w| w[0].mass >= w[1].mass));
        assert_eq!(cp.dishes.iter().map(|d| d.mass).sum::<u32>(), 10);
        for m in cp.doc_mixtures.values() {
            assert!((m.values().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
