//! Independent reference implementations used only by the test suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.gen::<f64>()).collect()).collect()
}

pub fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Minimum-cost perfect assignment on a square matrix (Kuhn–Munkres with
/// potentials, O(n³)).
pub fn hungarian(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| cost[p[j] - 1][j - 1]).sum()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Exact (unregularized) OT between uniform measures with squared Euclidean
/// cost: replicate atoms to lcm(n, m) copies and solve the assignment.
pub fn exact_ot_uniform(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (n, m) = (a.len(), b.len());
    let l = n / gcd(n, m) * m;
    let rows: Vec<&Vec<f64>> = a.iter().flat_map(|x| std::iter::repeat(x).take(l / n)).collect();
    let cols: Vec<&Vec<f64>> = b.iter().flat_map(|y| std::iter::repeat(y).take(l / m)).collect();
    let cost: Vec<Vec<f64>> = rows
        .iter()
        .map(|x| cols.iter().map(|y| sq_dist(x, y)).collect())
        .collect();
    hungarian(&cost) / l as f64
}

/// Exhaustive search over all permutations (n == m, uniform weights).
pub fn brute_force_ot(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    fn permute(k: usize, perm: &mut Vec<usize>, a: &[Vec<f64>], b: &[Vec<f64>], best: &mut f64) {
        if k == perm.len() {
            let c: f64 = perm.iter().enumerate().map(|(i, &j)| sq_dist(&a[i], &b[j])).sum();
            *best = best.min(c);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            permute(k + 1, perm, a, b, best);
            perm.swap(k, i);
        }
    }
    let mut perm: Vec<usize> = (0..a.len()).collect();
    let mut best = f64::INFINITY;
    permute(0, &mut perm, a, b, &mut best);
    best / a.len() as f64
}

/// Large-ε limit of the de-biased divergence with uniform weights:
/// ½ <α - β, -C (α - β)>.
pub fn mmd_limit(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut pts: Vec<(&Vec<f64>, f64)> = a.iter().map(|x| (x, 1.0 / a.len() as f64)).collect();
    pts.extend(b.iter().map(|y| (y, -1.0 / b.len() as f64)));
    let mut s = 0.0;
    for (x, wx) in &pts {
        for (y, wy) in &pts {
            s -= wx * wy * sq_dist(x, y);
        }
    }
    0.5 * s
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(x: &[f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let fp = f(&xp);
    xp[i] = x[i] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// |a - b| / max(|a|, |b|, floor); the floor keeps near-zero entries from
/// dominating.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

use otrecon::neural::{Graph, Tensor, Var};

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, floor).
pub fn vec_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Builds `loss = sum(w ⊙ out)` for a fixed random weighting `w` of the op output.
pub fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let w = random_tensor(&mut r, g.shape(out));
    let w = g.constant(w);
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

/// Worst relative error (vector norm per input) between backprop and central
/// differences with step `h` for the scalar produced by `build`.
pub fn grad_check(inputs: &[Tensor], h: f64, build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let l = build(&mut g, &vars);
        g.value(l).item().unwrap()
    };
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        let mut ts = inputs.to_vec();
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            ts[k].data_mut()[i] = x0 + h;
            let fp = eval(&ts);
            ts[k].data_mut()[i] = x0 - h;
            let fm = eval(&ts);
            ts[k].data_mut()[i] = x0;
            numeric[i] = (fp - fm) / (2.0 * h);
        }
        worst = worst.max(vec_rel_err(&analytic, &numeric, 1e-8));
    }
    worst
}

/// Direct 7-loop cross-correlation. `x: [N,C,H,W,D]`, `w: [Co,C,kh,kw,kd]`.
pub fn naive_conv3d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: [usize; 3], pad: [usize; 3]) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let (n, c, co) = (xs[0], xs[1], ws[0]);
    let inn = [xs[2], xs[3], xs[4]];
    let k = [ws[2], ws[3], ws[4]];
    let o: Vec<usize> = (0..3).map(|a| (inn[a] + 2 * pad[a] - k[a]) / stride[a] + 1).collect();
    let mut out = vec![0.0; n * co * o[0] * o[1] * o[2]];
    let xi = |s: usize, ch: usize, i: isize, j: isize, l: isize| -> f64 {
        if i < 0 || j < 0 || l < 0 || i as usize >= inn[0] || j as usize >= inn[1] || l as usize >= inn[2] {
            return 0.0;
        }
        x.data()[(((s * c + ch) * inn[0] + i as usize) * inn[1] + j as usize) * inn[2] + l as usize]
    };
    let mut idx = 0;
    for s in 0..n {
        for oc in 0..co {
            for i in 0..o[0] {
                for j in 0..o[1] {
                    for l in 0..o[2] {
                        let mut acc = b.map_or(0.0, |b| b.data()[oc]);
                        for ch in 0..c {
                            for a in 0..k[0] {
                                for bb in 0..k[1] {
                                    for e in 0..k[2] {
                                        let wv = w.data()[(((oc * c + ch) * k[0] + a) * k[1] + bb) * k[2] + e];
                                        acc += wv
                                            * xi(
                                                s,
                                                ch,
                                                (i * stride[0] + a) as isize - pad[0] as isize,
                                                (j * stride[1] + bb) as isize - pad[1] as isize,
                                                (l * stride[2] + e) as isize - pad[2] as isize,
                                            );
                                    }
                                }
                            }
                        }
                        out[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co, o[0], o[1], o[2]], out).unwrap()
}

/// Scatter definition of the transposed convolution. `w: [Ci,Co,kh,kw,kd]`.
pub fn naive_conv_transpose3d(x: &Tensor, w: &Tensor, stride: [usize; 3], pad: [usize; 3]) -> Tensor {
    let xs = x.shape();
    let ws = w.shape();
    let (n, ci, co) = (xs[0], xs[1], ws[1]);
    let k = [ws[2], ws[3], ws[4]];
    let full: Vec<usize> = (0..3).map(|a| (xs[2 + a] - 1) * stride[a] + k[a]).collect();
    let o: Vec<usize> = (0..3).map(|a| full[a] - 2 * pad[a]).collect();
    let mut out = vec![0.0; n * co * o[0] * o[1] * o[2]];
    for s in 0..n {
        for c in 0..ci {
            for i in 0..xs[2] {
                for j in 0..xs[3] {
                    for l in 0..xs[4] {
                        let v = x.data()[(((s * ci + c) * xs[2] + i) * xs[3] + j) * xs[4] + l];
                        for oc in 0..co {
                            for a in 0..k[0] {
                                for bb in 0..k[1] {
                                    for e in 0..k[2] {
                                        let p = [
                                            (i * stride[0] + a) as isize - pad[0] as isize,
                                            (j * stride[1] + bb) as isize - pad[1] as isize,
                                            (l * stride[2] + e) as isize - pad[2] as isize,
                                        ];
                                        if (0..3).any(|q| p[q] < 0 || p[q] as usize >= o[q]) {
                                            continue;
                                        }
                                        let wv = w.data()[(((c * co + oc) * k[0] + a) * k[1] + bb) * k[2] + e];
                                        let oi = (((s * co + oc) * o[0] + p[0] as usize) * o[1] + p[1] as usize) * o[2]
                                            + p[2] as usize;
                                        out[oi] += v * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co, o[0], o[1], o[2]], out).unwrap()
}

/// Trilinear upsampling computed independently per output voxel from the
/// half-pixel source coordinate.
pub fn naive_upsample(x: &Tensor, f: usize) -> Tensor {
    let s = x.shape();
    let (h, w, d) = (s[2], s[3], s[4]);
    let coord = |o: usize, n: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) / f as f64 - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = Vec::new();
    for blk in 0..s[0] * s[1] {
        let at = |i: usize, j: usize, l: usize| x.data()[blk * h * w * d + (i * w + j) * d + l];
        for oi in 0..h * f {
            for oj in 0..w * f {
                for ol in 0..d * f {
                    let (i0, i1, a) = coord(oi, h);
                    let (j0, j1, b) = coord(oj, w);
                    let (l0, l1, c) = coord(ol, d);
                    let mut v = 0.0;
                    for (i, wi) in [(i0, 1.0 - a), (i1, a)] {
                        for (j, wj) in [(j0, 1.0 - b), (j1, b)] {
                            for (l, wl) in [(l0, 1.0 - c), (l1, c)] {
                                v += wi * wj * wl * at(i, j, l);
                            }
                        }
                    }
                    out.push(v);
                }
            }
        }
    }
    Tensor::new(vec![s[0], s[1], h * f, w * f, d * f], out).unwrap()
}

/// Relative error between backprop and central differences over a sample of
/// coordinates from every named parameter, one tensor at a time.
pub fn param_grad_check(
    store: &otrecon::neural::ParamStore,
    coords_per_param: usize,
    h: f64,
    loss: impl Fn(&otrecon::neural::ParamStore, bool) -> (Graph, Var),
) -> Vec<(String, f64)> {
    param_grad_check_floor(store, coords_per_param, h, 1e-7, loss)
}

/// [`param_grad_check`] with an explicit norm floor. Small steps need a larger
/// floor: a parameter whose true gradient is exactly zero (a bias ahead of
/// instance norm) then reads as roundoff of order 1e-16·|loss|/h.
pub fn param_grad_check_floor(
    store: &otrecon::neural::ParamStore,
    coords_per_param: usize,
    h: f64,
    floor: f64,
    loss: impl Fn(&otrecon::neural::ParamStore, bool) -> (Graph, Var),
) -> Vec<(String, f64)> {
    let (mut g, l) = loss(store, true);
    g.backward(l).unwrap();
    let grads: std::collections::HashMap<String, Tensor> =
        g.param_grads().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let mut r = rng(99);
    let mut out = Vec::new();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let len = store.get(&name).unwrap().len();
        let analytic_full = grads.get(&store.leaf_name(&name)).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; len]);
        let picks: Vec<usize> = (0..coords_per_param.min(len)).map(|_| r.gen_range(0..len)).collect();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &i in &picks {
            let mut s = store.clone();
            let x0 = s.get(&name).unwrap().data()[i];
            s.get_mut(&name).unwrap().data_mut()[i] = x0 + h;
            let (gp, lp) = loss(&s, false);
            s.get_mut(&name).unwrap().data_mut()[i] = x0 - h;
            let (gm, lm) = loss(&s, false);
            numeric.push((gp.value(lp).item().unwrap() - gm.value(lm).item().unwrap()) / (2.0 * h));
            analytic.push(analytic_full[i]);
        }
        out.push((name, vec_rel_err(&analytic, &numeric, floor)));
    }
    out
}
