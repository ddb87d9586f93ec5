//! Exhaustive posterior over Chinese-restaurant-franchise configurations for
//! tiny corpora.
//!
//! A configuration is a table partition of each document's words plus a dish
//! partition of all tables, both as restricted growth strings. Its joint
//! probability with the words is built sequentially: CRP seating word by word,
//! CRP dish choice table by table, then a Polya urn per dish over the words in
//! corpus order. Exchangeability makes this equal to the closed-form joint.

use std::collections::BTreeMap;

pub type ConfigKey = (Vec<Vec<u8>>, Vec<u8>);

/// Every restricted growth string of length `n`.
pub fn set_partitions(n: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(n);
    fn rec(n: usize, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        let next = cur.iter().copied().max().map_or(0, |m| m + 1);
        for label in 0..=next {
            cur.push(label);
            rec(n, cur, out);
            cur.pop();
        }
    }
    rec(n, &mut cur, &mut out);
    out
}

pub fn joint_probability(
    docs: &[Vec<u32>],
    vocab: usize,
    gamma: f64,
    alpha0: f64,
    eta: f64,
    seating: &[Vec<u8>],
    dishes: &[u8],
) -> f64 {
    let mut p = 1.0;
    let mut table_dish: Vec<Vec<u8>> = Vec::new();
    let mut next_table = 0usize;
    for s in seating {
        let mut sizes: Vec<f64> = Vec::new();
        for (i, &t) in s.iter().enumerate() {
            let t = t as usize;
            if t < sizes.len() {
                p *= sizes[t] / (i as f64 + alpha0);
                sizes[t] += 1.0;
            } else {
                p *= alpha0 / (i as f64 + alpha0);
                sizes.push(1.0);
            }
        }
        table_dish.push(dishes[next_table..next_table + sizes.len()].to_vec());
        next_table += sizes.len();
    }
    let mut m: Vec<f64> = Vec::new();
    for (s, &k) in dishes.iter().enumerate() {
        let k = k as usize;
        if k < m.len() {
            p *= m[k] / (s as f64 + gamma);
            m[k] += 1.0;
        } else {
            p *= gamma / (s as f64 + gamma);
            m.push(1.0);
        }
    }
    let mut n_kv = vec![vec![0.0; vocab]; m.len()];
    let mut n_k = vec![0.0; m.len()];
    for (j, words) in docs.iter().enumerate() {
        for (i, &w) in words.iter().enumerate() {
            let k = table_dish[j][seating[j][i] as usize] as usize;
            p *= (n_kv[k][w as usize] + eta) / (n_k[k] + vocab as f64 * eta);
            n_kv[k][w as usize] += 1.0;
            n_k[k] += 1.0;
        }
    }
    p
}

/// Normalized posterior over every configuration.
pub fn posterior(docs: &[Vec<u32>], vocab: usize, gamma: f64, alpha0: f64, eta: f64) -> BTreeMap<ConfigKey, f64> {
    let per_doc: Vec<Vec<Vec<u8>>> = docs.iter().map(|d| set_partitions(d.len())).collect();
    let mut seatings: Vec<Vec<Vec<u8>>> = vec![Vec::new()];
    for options in &per_doc {
        seatings = seatings
            .into_iter()
            .flat_map(|prefix| {
                options.iter().map(move |o| {
                    let mut s = prefix.clone();
                    s.push(o.clone());
                    s
                })
            })
            .collect();
    }
    let mut out = BTreeMap::new();
    for seating in seatings {
        let tables: usize = seating.iter().map(|s| *s.iter().max().unwrap() as usize + 1).sum();
        for dishes in set_partitions(tables) {
            let p = joint_probability(docs, vocab, gamma, alpha0, eta, &seating, &dishes);
            out.insert((seating.clone(), dishes), p);
        }
    }
    let z: f64 = out.values().sum();
    out.values_mut().for_each(|p| *p /= z);
    out
}

/// Relabels raw table/dish ids of a sampler state into the canonical key.
pub fn canonical_key(seating: &[Vec<u32>], table_dish: impl Fn(usize, u32) -> u32) -> ConfigKey {
    let mut rgs_seating = Vec::new();
    let mut tables_in_order: Vec<(usize, u32)> = Vec::new();
    for (j, s) in seating.iter().enumerate() {
        let mut labels: Vec<u32> = Vec::new();
        let mut rgs = Vec::new();
        for &t in s {
            let pos = labels.iter().position(|&x| x == t).unwrap_or_else(|| {
                labels.push(t);
                tables_in_order.push((j, t));
                labels.len() - 1
            });
            rgs.push(pos as u8);
        }
        rgs_seating.push(rgs);
    }
    let mut dish_labels: Vec<u32> = Vec::new();
    let dishes = tables_in_order
        .iter()
        .map(|&(j, t)| {
            let k = table_dish(j, t);
            dish_labels.iter().position(|&x| x == k).unwrap_or_else(|| {
                dish_labels.push(k);
                dish_labels.len() - 1
            }) as u8
        })
        .collect();
    (rgs_seating, dishes)
}
