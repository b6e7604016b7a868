#![allow(dead_code)]

pub mod dd;

use dd::Dd;

use egolstm::datamodel::{DaySequence, FeatureMatrix};
use egolstm::nnet::{DenseLayer, LayerStack, LstmLayer};
use rand::Rng;

pub fn random_sequence<R: Rng>(rng: &mut R, id: &str, len: usize, dim: usize, k: usize) -> DaySequence {
    let data = (0..len * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..len).map(|_| rng.random_range(0..k)).collect();
    DaySequence::new(
        id,
        "u1",
        FeatureMatrix::new(len, dim, data).unwrap(),
        labels,
        None,
    )
    .unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn affine(w: &egolstm::nnet::Matrix, x: &[f64], acc: &mut [f64]) {
    for (r, a) in acc.iter_mut().enumerate() {
        for (c, xv) in x.iter().enumerate() {
            *a += w.get(r, c) * xv;
        }
    }
}

pub fn dense(layer: &DenseLayer, x: &[f64]) -> Vec<f64> {
    let mut out = layer.b.clone();
    affine(&layer.w, x, &mut out);
    out
}

/// Plain LSTM step written straight from the gate equations.
pub fn lstm_step(l: &LstmLayer, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let pre = |g: usize| {
        let mut a = l.b[g].clone();
        affine(&l.w[g], x, &mut a);
        affine(&l.u[g], h, &mut a);
        a
    };
    let (i, f, o, g) = (pre(0), pre(1), pre(2), pre(3));
    let mut c2 = vec![0.0; c.len()];
    let mut h2 = vec![0.0; c.len()];
    for j in 0..c.len() {
        c2[j] = sigmoid(f[j]) * c[j] + sigmoid(i[j]) * g[j].tanh();
        h2[j] = sigmoid(o[j]) * c2[j].tanh();
    }
    (h2, c2)
}

/// Unbatched piggyback simulation. The sequence is walked batch by batch; at
/// overlap positions the LSTM input is the hidden output recorded for the same
/// absolute frame during the previous batch. Returns per-batch logits and the
/// retained per-frame logits (first batch that saw the frame).
pub fn piggyback_oracle(net: &LayerStack, seq: &DaySequence, n: usize, m: usize) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
    let embed = net.embed.as_ref().unwrap();
    let lstm = net.lstm.as_ref().unwrap();
    let hdim = lstm.b[0].len();
    let len = seq.len();
    let mut batches = Vec::new();
    let mut retained: Vec<Option<Vec<f64>>> = vec![None; len];
    let mut prev_h: std::collections::HashMap<usize, Vec<f64>> = Default::default();
    let mut start = 0usize;
    let mut first = true;
    loop {
        let mut h = vec![0.0; hdim];
        let mut c = vec![0.0; hdim];
        let mut cur_h = std::collections::HashMap::new();
        let mut logits = Vec::new();
        for p in 0..n {
            let abs = start + p;
            let frame = abs.min(len - 1);
            let x = if !first && p < m {
                prev_h[&abs].clone()
            } else {
                dense(embed, seq.features.row(frame))
            };
            let (h2, c2) = lstm_step(lstm, &x, &h, &c);
            h = h2;
            c = c2;
            cur_h.insert(abs, h.clone());
            let z = dense(&net.head, &h);
            if abs < len && retained[abs].is_none() {
                retained[abs] = Some(z.clone());
            }
            logits.push(z);
        }
        batches.push(logits);
        if start + n >= len {
            break;
        }
        prev_h = cur_h;
        start += n - m;
        first = false;
    }
    (batches, retained.into_iter().map(Option::unwrap).collect())
}

/// Exactly rounded sum of floats (Shewchuk partials).
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    partials.iter().rev().fold(0.0, |a, b| a + b)
}

/// Bhattacharyya distance of two count vectors, each probability formed by
/// exact summation of the counts and the coefficient by exact summation.
pub fn bhattacharyya_oracle(p: &[u64], q: &[u64]) -> f64 {
    let sp: u64 = p.iter().sum();
    let sq: u64 = q.iter().sum();
    let bc = exact_sum(
        p.iter()
            .zip(q)
            .map(|(&a, &b)| ((a as f64 * b as f64) / (sp as f64 * sq as f64)).sqrt()),
    );
    if bc <= 0.0 {
        f64::INFINITY
    } else {
        (-bc.ln()).max(0.0)
    }
}

/// First-fit decreasing written independently: stable descending sort by
/// size, each item into the first bin that still has room.
pub fn ffd_oracle(sizes: &[usize], capacity: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let mut bins: Vec<(usize, Vec<usize>)> = Vec::new();
    for i in order {
        match bins.iter_mut().find(|(load, _)| load + sizes[i] <= capacity) {
            Some((load, items)) => {
                *load += sizes[i];
                items.push(i);
            }
            None => bins.push((sizes[i], vec![i])),
        }
    }
    bins.into_iter().map(|(_, items)| items).collect()
}

/// Subsets of `pool` of size `k` in lexicographic order of their sorted
/// index tuples, produced by bitmask enumeration.
pub fn subsets_lex(pool: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut all: Vec<Vec<usize>> = (0u32..(1u32 << pool.len()))
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| {
            (0..pool.len())
                .filter(|&i| m & (1 << i) != 0)
                .map(|i| pool[i])
                .collect()
        })
        .collect();
    all.sort();
    all
}

fn pick_min(cands: Vec<Vec<usize>>, score: impl Fn(&[usize]) -> f64) -> Vec<usize> {
    let scored: Vec<(Vec<usize>, f64)> = cands.into_iter().map(|c| {
        let s = score(&c);
        (c, s)
    }).collect();
    let best = scored.iter().map(|(_, s)| *s).fold(f64::INFINITY, f64::min);
    scored
        .into_iter()
        .find(|(_, s)| (best.is_infinite() && s.is_infinite()) || *s <= best + 1e-12)
        .unwrap()
        .0
}

/// Brute-force two-stage bin selection: each stage minimises the distance of
/// the chosen bins plus the distance of the other pool bins, both measured
/// against the whole-dataset distribution.
pub fn select_bins_oracle(counts: &[Vec<u64>], kt: usize, kv: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let k = counts[0].len();
    let sum = |bins: &[usize]| -> Vec<u64> {
        (0..k).map(|c| bins.iter().map(|&b| counts[b][c]).sum()).collect()
    };
    let all: Vec<usize> = (0..counts.len()).collect();
    let whole = sum(&all);
    let objective = |pool: &[usize], chosen: &[usize]| {
        let others: Vec<usize> = pool.iter().copied().filter(|b| !chosen.contains(b)).collect();
        bhattacharyya_oracle(&sum(chosen), &whole) + bhattacharyya_oracle(&sum(&others), &whole)
    };
    let test = pick_min(subsets_lex(&all, kt), |s| objective(&all, s));
    let rest: Vec<usize> = all.iter().copied().filter(|b| !test.contains(b)).collect();
    let val = pick_min(subsets_lex(&rest, kv), |s| objective(&rest, s));
    let train = rest.into_iter().filter(|b| !val.contains(b)).collect();
    (test, val, train)
}

/// Mean masked softmax cross-entropy of one window, evaluated in
/// double-double from the gate equations. `carry` gives the positions whose
/// LSTM input is replaced and the rows to use, in order; `drop` the per-step
/// dropout multipliers on the LSTM output; `shift` adds a double-double offset
/// to coordinate `coord` of the `tensor`-th parameter tensor.
#[allow(clippy::too_many_arguments)]
pub fn dd_window_loss(
    net: &LayerStack,
    inputs: &[&[f64]],
    labels: &[usize],
    loss_mask: &[bool],
    carry: Option<(&[bool], &[Vec<f64>])>,
    drop: Option<&[Vec<f64>]>,
    shift: Option<(usize, usize, Dd)>,
) -> Dd {
    let mut params: Vec<(String, Vec<usize>, Vec<Dd>)> = net
        .tensors()
        .into_iter()
        .map(|(n, shape, data)| (n, shape, data.iter().map(|&v| Dd::new(v)).collect()))
        .collect();
    if let Some((t, c, delta)) = shift {
        params[t].2[c] = params[t].2[c] + delta;
    }
    let get = |name: &str| params.iter().find(|p| p.0 == name).map(|p| (&p.1, &p.2));
    let affine = |w: &str, b: &str, x: &[Dd]| -> Vec<Dd> {
        let (shape, wv) = get(w).unwrap();
        let (_, bv) = get(b).unwrap();
        (0..shape[0])
            .map(|r| {
                let mut acc = bv[r];
                for (c, xv) in x.iter().enumerate() {
                    acc = acc + wv[r * shape[1] + c] * *xv;
                }
                acc
            })
            .collect()
    };
    let matvec = |w: &str, x: &[Dd]| -> Vec<Dd> {
        let (shape, wv) = get(w).unwrap();
        (0..shape[0])
            .map(|r| {
                let mut acc = Dd::ZERO;
                for (c, xv) in x.iter().enumerate() {
                    acc = acc + wv[r * shape[1] + c] * *xv;
                }
                acc
            })
            .collect()
    };
    let mut carried_rows = carry.map(|(_, rows)| rows.iter());
    let mut h: Option<(Vec<Dd>, Vec<Dd>)> = get("lstm.b_i").map(|(s, _)| (vec![Dd::ZERO; s[0]], vec![Dd::ZERO; s[0]]));
    let mut total = Dd::ZERO;
    let mut count = 0usize;
    for (t, x) in inputs.iter().enumerate() {
        let x: Vec<Dd> = x.iter().map(|&v| Dd::new(v)).collect();
        let embedded = if get("embed.W").is_some() { affine("embed.W", "embed.b", &x) } else { x };
        let is_carried = carry.is_some_and(|(m, _)| m[t]);
        let lstm_in: Vec<Dd> = if is_carried {
            carried_rows.as_mut().unwrap().next().unwrap().iter().map(|&v| Dd::new(v)).collect()
        } else {
            embedded
        };
        let head_in: Vec<Dd> = match h.as_mut() {
            Some((hp, cp)) => {
                let gate = |g: &str| -> Vec<Dd> {
                    let a = affine(&format!("lstm.W_{g}"), &format!("lstm.b_{g}"), &lstm_in);
                    let u = matvec(&format!("lstm.U_{g}"), hp);
                    a.into_iter().zip(u).map(|(a, u)| a + u).collect()
                };
                let (i, f, o, g) = (gate("i"), gate("f"), gate("o"), gate("c"));
                let mut hn = Vec::with_capacity(cp.len());
                for j in 0..cp.len() {
                    cp[j] = f[j].sigmoid() * cp[j] + i[j].sigmoid() * g[j].tanh();
                    hn.push(o[j].sigmoid() * cp[j].tanh());
                }
                *hp = hn.clone();
                match drop {
                    Some(d) => hn.iter().zip(&d[t]).map(|(v, &m)| *v * Dd::new(m)).collect(),
                    None => hn,
                }
            }
            None => lstm_in,
        };
        if !loss_mask[t] {
            continue;
        }
        let z = affine("head.W", "head.b", &head_in);
        let mx = z.iter().map(|v| v.hi).fold(f64::NEG_INFINITY, f64::max);
        let mut se = Dd::ZERO;
        for v in &z {
            se = se + (*v - Dd::new(mx)).exp();
        }
        total = total + Dd::new(mx) + se.ln() - z[labels[t]];
        count += 1;
    }
    total / Dd::new(count as f64)
}

/// Central difference `(L(w+eps) - L(w-eps)) / 2eps` of every parameter
/// coordinate with the loss evaluated in double-double; same tensor order as
/// `LayerStack::tensors`.
pub fn dd_central_differences(
    net: &LayerStack,
    inputs: &[&[f64]],
    labels: &[usize],
    loss_mask: &[bool],
    carry: Option<(&[bool], &[Vec<f64>])>,
    drop: Option<&[Vec<f64>]>,
    eps: f64,
) -> Vec<Vec<f64>> {
    net.tensors()
        .iter()
        .enumerate()
        .map(|(t, (_, _, data))| {
            (0..data.len())
                .map(|c| {
                    let up = dd_window_loss(net, inputs, labels, loss_mask, carry, drop, Some((t, c, Dd::new(eps))));
                    let down = dd_window_loss(net, inputs, labels, loss_mask, carry, drop, Some((t, c, Dd::new(-eps))));
                    ((up - down) / Dd::new(2.0 * eps)).to_f64()
                })
                .collect()
        })
        .collect()
}
