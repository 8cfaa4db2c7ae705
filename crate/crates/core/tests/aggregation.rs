mod common;

use common::{
    abs_dot, dense_attention, dense_conv4d, dot, fd_grad, max_abs_diff, naive_conv2d, random_vec, rel_err, rng,
    sparse_as_dense, uniform,
};
use dacm::aggregation::{
    attention_weights, bilinear_sample, bilinear_sample_backward, ddt_branch_forward, ddt_forward,
    deformable_attention_2d, offset_network, parameter_gradients, sparse_conv4d, AggregationOp, AttentionParams,
    DdtBranch, DdtConfig, DdtParams, Parameterized, Sparse4dConvParams, Volume,
};
use dacm::tensor::Tensor;
use dacm::DacmError;
use rand::Rng;

const FD_TOL: f64 = 1e-4;
const DRAWS: u64 = 20;

fn tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, random_vec(rng, n)).unwrap()
}

fn volume(rng: &mut impl Rng, ch: usize, dims: [usize; 4]) -> Volume {
    let n = ch * dims.iter().product::<usize>();
    Volume::new(ch, dims, random_vec(rng, n)).unwrap()
}

/// Every parameter replaced by a uniform draw on `[-scale, scale]`.
fn randomize<P: Parameterized>(p: &mut P, scale: f64, rng: &mut impl Rng) {
    let flat: Vec<f64> = (0..p.num_params()).map(|_| uniform(rng, -scale, scale)).collect();
    p.assign_flat(&flat).unwrap();
}

fn randomize_tensor(t: &mut Tensor, scale: f64, rng: &mut impl Rng) {
    for v in t.data_mut() {
        *v = uniform(rng, -scale, scale);
    }
}

fn small_ddt() -> DdtConfig {
    DdtConfig {
        embed_channels: 3,
        heads: 2,
        head_dim: 2,
        offset_hidden: 3,
        max_offset: 0.5,
    }
}

/// Reference bilinear lookup at a normalised `(x, y)` with border clamping.
fn bilinear_oracle(grid: &[f64], c: usize, h: usize, w: usize, x: f64, y: f64) -> Vec<f64> {
    let pix = |v: f64, n: usize| if n == 1 { 0.0 } else { (v.clamp(-1.0, 1.0) + 1.0) * (n - 1) as f64 / 2.0 };
    let (px, py) = (pix(x, w), pix(y, h));
    let (x0, y0) = (px.floor() as usize, py.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (px - x0 as f64, py - y0 as f64);
    (0..c)
        .map(|ch| {
            let g = |i: usize, j: usize| grid[ch * h * w + i * w + j];
            (1.0 - fy) * ((1.0 - fx) * g(y0, x0) + fx * g(y0, x1)) + fy * ((1.0 - fx) * g(y1, x0) + fx * g(y1, x1))
        })
        .collect()
}

/// Deformable attention assembled from the reference pieces: offsets from two
/// naive convolutions, keys and values read through `bilinear_oracle`.
fn deformable_oracle(x: &[f64], h: usize, w: usize, p: &AttentionParams) -> Vec<f64> {
    let c = p.in_channels;
    let t = h * w;
    let hidden: Vec<f64> = naive_conv2d(x, c, h, w, &p.offset.conv1.weight, Some(p.offset.conv1.bias.data()))
        .into_iter()
        .map(f64::tanh)
        .collect();
    let raw = naive_conv2d(&hidden, p.offset.conv1.c_out, h, w, &p.offset.conv2.weight, Some(p.offset.conv2.bias.data()));
    let off: Vec<f64> = raw.iter().map(|v| p.max_offset * v.tanh()).collect();
    let cp = p.projected_channels();
    let d = p.head_dim;
    let gc = |i: usize, n: usize| if n == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (n - 1) as f64 };
    let lin = |v: &[f64], wt: &Tensor, b: &Tensor, o: usize| b.data()[o] + (0..c).map(|ch| v[ch] * wt.data()[ch * cp + o]).sum::<f64>();
    let mut out = vec![0.0; cp * t];
    for head in 0..p.heads {
        let sampled: Vec<Vec<f64>> = (0..t)
            .map(|tok| {
                let (i, j) = (tok / w, tok % w);
                let sx = gc(j, w) + off[2 * head * t + tok];
                let sy = gc(i, h) + off[(2 * head + 1) * t + tok];
                bilinear_oracle(x, c, h, w, sx, sy)
            })
            .collect();
        let cols = head * d..(head + 1) * d;
        for i in 0..t {
            let xi: Vec<f64> = (0..c).map(|ch| x[ch * t + i]).collect();
            let qi: Vec<f64> = cols.clone().map(|o| lin(&xi, &p.w_q, &p.b_q, o)).collect();
            let logits: Vec<f64> = (0..t)
                .map(|j| {
                    let kj: Vec<f64> = cols.clone().map(|o| lin(&sampled[j], &p.w_k, &p.b_k, o)).collect();
                    dot(&qi, &kj) / (d as f64).sqrt()
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for o in cols.clone() {
                out[o * t + i] = (0..t).map(|j| logits[j].exp() / z * lin(&sampled[j], &p.w_v, &p.b_v, o)).sum();
            }
        }
    }
    out
}

// --- bilinear ---------------------------------------------------------------

#[test]
fn bilinear_exact_on_grid_and_midpoints() {
    let mut r = rng(1);
    let (c, h, w) = (2, 3, 4);
    let grid = tensor(&mut r, &[c, h, w]);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..h {
        for j in 0..w {
            xs.push(-1.0 + 2.0 * j as f64 / (w - 1) as f64);
            ys.push(-1.0 + 2.0 * i as f64 / (h - 1) as f64);
        }
    }
    let coords = Tensor::from_vec(&[2, h, w], [xs, ys].concat()).unwrap();
    let out = bilinear_sample(&grid, &coords).unwrap();
    assert!(max_abs_diff(out.data(), grid.data()) < 1e-12);

    // midpoint of cells (0,0) and (0,1)
    let mid = Tensor::from_vec(&[2, 1, 1], vec![-1.0 + 1.0 / (w - 1) as f64, -1.0]).unwrap();
    let out = bilinear_sample(&grid, &mid).unwrap();
    for ch in 0..c {
        let want = 0.5 * (grid.data()[ch * h * w] + grid.data()[ch * h * w + 1]);
        assert!((out.data()[ch] - want).abs() < 1e-12);
    }
}

#[test]
fn bilinear_matches_oracle_and_clamps() {
    let mut r = rng(2);
    let (c, h, w) = (3, 4, 5);
    let grid = tensor(&mut r, &[c, h, w]);
    let n = 30;
    let coords: Vec<f64> = (0..2 * n).map(|_| uniform(&mut r, -1.5, 1.5)).collect();
    let ct = Tensor::from_vec(&[2, 1, n], coords.clone()).unwrap();
    let out = bilinear_sample(&grid, &ct).unwrap();
    for k in 0..n {
        let want = bilinear_oracle(grid.data(), c, h, w, coords[k], coords[n + k]);
        for ch in 0..c {
            assert!((out.data()[ch * n + k] - want[ch]).abs() < 1e-12);
        }
    }
    // outside the grid the coordinate gradient vanishes
    let far = Tensor::from_vec(&[2, 1, 1], vec![3.0, -2.5]).unwrap();
    let (_, dc) = bilinear_sample_backward(&grid, &far, &Tensor::from_vec(&[c, 1, 1], vec![1.0; c]).unwrap()).unwrap();
    assert_eq!(dc.data(), &[0.0, 0.0]);
}

#[test]
fn bilinear_rejects_bad_input() {
    let grid = Tensor::zeros(&[1, 2, 2]);
    let nan = Tensor::from_vec(&[2, 1, 1], vec![f64::NAN, 0.0]).unwrap();
    assert!(matches!(bilinear_sample(&grid, &nan), Err(DacmError::Numerical(_))));
    assert!(matches!(bilinear_sample(&grid, &Tensor::zeros(&[3, 1, 1])), Err(DacmError::Dimension(_))));
}

#[test]
fn bilinear_gradients_match_finite_differences() {
    let mut r = rng(3);
    for _ in 0..DRAWS {
        let (c, h, w) = (2, 3, 3);
        let grid = tensor(&mut r, &[c, h, w]);
        // interior points; kinks at cell boundaries are hit with negligible probability
        let coords: Vec<f64> = (0..8).map(|_| uniform(&mut r, -0.9, 0.9)).collect();
        let ct = Tensor::from_vec(&[2, 1, 4], coords.clone()).unwrap();
        let u = random_vec(&mut r, c * 4);
        let up = Tensor::from_vec(&[c, 1, 4], u.clone()).unwrap();
        let (dg, dc) = bilinear_sample_backward(&grid, &ct, &up).unwrap();
        let f = |g: &[f64], co: &[f64]| {
            let y = bilinear_sample(&Tensor::from_vec(&[c, h, w], g.to_vec()).unwrap(), &Tensor::from_vec(&[2, 1, 4], co.to_vec()).unwrap()).unwrap();
            dot(&u, y.data())
        };
        let scale = abs_dot(&u, bilinear_sample(&grid, &ct).unwrap().data());
        let ng = fd_grad(grid.data(), |g| f(g, &coords));
        let nc = fd_grad(&coords, |co| f(grid.data(), co));
        assert!(rel_err(dg.data(), &ng, scale) < FD_TOL);
        assert!(rel_err(dc.data(), &nc, scale) < FD_TOL);
    }
}

// --- offset network ---------------------------------------------------------

#[test]
fn offset_network_shape_zero_and_oracle() {
    let p = AttentionParams::zeros(3, 2, 2, 4);
    let mut r = rng(4);
    let slice = tensor(&mut r, &[3, 4, 5]);
    let o = offset_network(&slice, &p).unwrap();
    assert_eq!(o.shape(), &[2, 2, 4, 5]);
    assert!(o.data().iter().all(|&v| v == 0.0));

    let mut p = AttentionParams::random(3, 2, 2, 4, 1.0, &mut r);
    randomize(&mut p.offset, 0.8, &mut r);
    let hidden: Vec<f64> = naive_conv2d(slice.data(), 3, 4, 5, &p.offset.conv1.weight, Some(p.offset.conv1.bias.data()))
        .into_iter()
        .map(f64::tanh)
        .collect();
    let raw = naive_conv2d(&hidden, 4, 4, 5, &p.offset.conv2.weight, Some(p.offset.conv2.bias.data()));
    let want: Vec<f64> = raw.iter().map(|v| p.max_offset * v.tanh()).collect();
    let got = offset_network(&slice, &p).unwrap();
    assert!(max_abs_diff(got.data(), &want) < 1e-12);
    assert!(got.data().iter().all(|v| v.abs() <= p.max_offset));
}

// --- deformable attention ---------------------------------------------------

#[test]
fn zero_offsets_reduce_to_dense_attention() {
    let mut r = rng(5);
    for (c, heads, d, h, w) in [(3, 2, 2, 3, 4), (4, 1, 3, 2, 2), (2, 3, 1, 1, 5)] {
        let mut p = AttentionParams::random(c, heads, d, 3, 0.0, &mut r);
        randomize_tensor(&mut p.b_q, 0.5, &mut r);
        randomize_tensor(&mut p.b_k, 0.5, &mut r);
        randomize_tensor(&mut p.b_v, 0.5, &mut r);
        let x = tensor(&mut r, &[c, h, w]);
        let got = deformable_attention_2d(&x, &p).unwrap();
        let want = dense_attention(x.data(), c, h * w, &p);
        assert!(max_abs_diff(got.data(), &want) < 1e-8);
    }
}

#[test]
fn nonzero_offsets_match_reference_pipeline() {
    let mut r = rng(6);
    for _ in 0..5 {
        let mut p = AttentionParams::random(3, 2, 2, 3, 1.0, &mut r);
        randomize(&mut p, 0.8, &mut r);
        let x = tensor(&mut r, &[3, 3, 4]);
        let got = deformable_attention_2d(&x, &p).unwrap();
        assert!(max_abs_diff(got.data(), &deformable_oracle(x.data(), 3, 4, &p)) < 1e-10);
    }
}

#[test]
fn single_cell_slice_returns_value_projection() {
    let mut r = rng(7);
    let mut p = AttentionParams::random(3, 2, 2, 3, 1.0, &mut r);
    randomize(&mut p, 1.0, &mut r);
    let x = tensor(&mut r, &[3, 1, 1]);
    let got = deformable_attention_2d(&x, &p).unwrap();
    for o in 0..4 {
        let want = p.b_v.data()[o] + (0..3).map(|ch| x.data()[ch] * p.w_v.data()[ch * 4 + o]).sum::<f64>();
        assert!((got.data()[o] - want).abs() < 1e-12);
    }
}

#[test]
fn attention_rows_are_distributions() {
    let mut r = rng(8);
    let mut p = AttentionParams::random(2, 3, 2, 3, 1.0, &mut r);
    randomize(&mut p, 1.5, &mut r);
    let x = tensor(&mut r, &[2, 4, 4]);
    let a = attention_weights(&x, &p).unwrap();
    assert_eq!(a.len(), 3);
    for head in &a {
        for row in head.chunks(16) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rejects_channel_mismatch() {
    let p = AttentionParams::zeros(3, 1, 2, 2);
    assert!(matches!(
        deformable_attention_2d(&Tensor::zeros(&[2, 3, 3]), &p),
        Err(DacmError::Dimension(_))
    ));
}

// --- DDT --------------------------------------------------------------------

/// One branch evaluated slice by slice through the reference attention.
fn branch_oracle(v: &Volume, b: &DdtBranch, support_side: bool) -> Vec<f64> {
    let [hq, wq, hs, ws] = v.dims();
    let (nq, ns) = (hq * wq, hs * ws);
    let src = v.channel(0);
    let mut out = vec![0.0; nq * ns];
    let (outer, inner, h, w) = if support_side { (nq, ns, hs, ws) } else { (ns, nq, hq, wq) };
    let index = |o: usize, i: usize| if support_side { o * ns + i } else { i * ns + o };
    let ce = b.embed_w.len();
    for o in 0..outer {
        let raw: Vec<f64> = (0..inner).map(|i| src[index(o, i)]).collect();
        let lifted: Vec<f64> = (0..ce)
            .flat_map(|ch| raw.iter().map(move |x| b.embed_w.data()[ch] * x + b.embed_b.data()[ch]))
            .collect();
        let att = deformable_oracle(&lifted, h, w, &b.attn);
        for i in 0..inner {
            out[index(o, i)] = b.proj_b.data()[0]
                + (0..b.proj_w.len()).map(|k| b.proj_w.data()[k] * att[k * inner + i]).sum::<f64>();
        }
    }
    out
}

#[test]
fn ddt_is_sum_of_branches_and_matches_slice_oracle() {
    let mut r = rng(9);
    for dims in [[2, 3, 3, 2], [1, 1, 2, 2], [3, 2, 1, 1]] {
        let mut p = DdtParams::random(&small_ddt(), 1.0, 1.0, &mut r);
        randomize(&mut p, 0.8, &mut r);
        let v = volume(&mut r, 1, dims);
        let s = ddt_branch_forward(&v, &p.sdt, true).unwrap();
        let q = ddt_branch_forward(&v, &p.qdt, false).unwrap();
        let both = ddt_forward(&v, &p.sdt, &p.qdt).unwrap();
        assert_eq!(both.dims(), dims);
        let sum: Vec<f64> = s.data().iter().zip(q.data()).map(|(a, b)| a + b).collect();
        assert!(max_abs_diff(both.data(), &sum) < 1e-12);
        assert!(max_abs_diff(s.data(), &branch_oracle(&v, &p.sdt, true)) < 1e-10);
        assert!(max_abs_diff(q.data(), &branch_oracle(&v, &p.qdt, false)) < 1e-10);
    }
}

#[test]
fn ddt_rejects_multichannel_volume() {
    let mut r = rng(10);
    let p = DdtParams::random(&small_ddt(), 1.0, 1.0, &mut r);
    let v = volume(&mut r, 2, [2, 2, 2, 2]);
    assert!(matches!(ddt_forward(&v, &p.sdt, &p.qdt), Err(DacmError::Dimension(_))));
}

#[test]
fn zero_projection_gives_constant_bias() {
    let mut r = rng(11);
    let mut p = DdtParams::random(&small_ddt(), 1.0, 0.0, &mut r);
    p.sdt.proj_b.data_mut()[0] = 0.25;
    p.qdt.proj_b.data_mut()[0] = -0.75;
    let v = volume(&mut r, 1, [2, 2, 3, 3]);
    let out = ddt_forward(&v, &p.sdt, &p.qdt).unwrap();
    assert!(out.data().iter().all(|&x| (x + 0.5).abs() < 1e-15));
}

// --- sparse 4D convolution --------------------------------------------------

#[test]
fn sparse_conv_matches_dense_4d() {
    let mut r = rng(12);
    for (ci, co, dims) in [(1, 1, [2, 2, 2, 2]), (2, 3, [2, 2, 2, 2]), (2, 2, [3, 2, 2, 3])] {
        let mut p = Sparse4dConvParams::random(ci, co, 3, 1.0, &mut r);
        randomize_tensor(&mut p.bias, 0.5, &mut r);
        let v = volume(&mut r, ci, dims);
        let got = sparse_conv4d(&v, &p).unwrap();
        let want = dense_conv4d(&v, co, 3, sparse_as_dense(&p), p.bias.data());
        assert!(max_abs_diff(got.data(), &want) < 1e-10);
    }
}

#[test]
fn sparse_conv_centre_taps_and_zero_weights() {
    let mut r = rng(13);
    let v = volume(&mut r, 1, [2, 3, 2, 2]);
    let mut p = Sparse4dConvParams::zeros(1, 1, 3);
    assert!(sparse_conv4d(&v, &p).unwrap().data().iter().all(|&x| x == 0.0));
    // centre of both kernels set to one: each cell counted twice
    p.support_weight.data_mut()[4] = 1.0;
    p.query_weight.data_mut()[4] = 1.0;
    let out = sparse_conv4d(&v, &p).unwrap();
    let twice: Vec<f64> = v.data().iter().map(|x| 2.0 * x).collect();
    assert!(max_abs_diff(out.data(), &twice) < 1e-15);

    let even = Sparse4dConvParams::zeros(1, 1, 2);
    assert!(matches!(sparse_conv4d(&v, &even), Err(DacmError::Dimension(_))));
}

// --- reverse passes ---------------------------------------------------------

fn assert_op_gradients<P: Parameterized + Clone>(
    name: &str,
    input: &[f64],
    params: &P,
    forward: impl Fn(&[f64], &P) -> Vec<f64>,
    backward: impl Fn(&[f64]) -> dacm::aggregation::OpGradients,
    rng: &mut impl Rng,
) {
    let y = forward(input, params);
    let u = random_vec(rng, y.len());
    let scale = abs_dot(&u, &y);
    let g = backward(&u);
    let nx = fd_grad(input, |x| dot(&u, &forward(x, params)));
    let e = rel_err(&g.input, &nx, scale);
    assert!(e < FD_TOL, "{name} input: {e:e}");
    let mut q = params.clone();
    let np = fd_grad(&params.flatten(), |flat| {
        q.assign_flat(flat).unwrap();
        dot(&u, &forward(input, &q))
    });
    let analytic: Vec<f64> = g.params.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    let e = rel_err(&analytic, &np, scale);
    assert!(e < FD_TOL, "{name} params: {e:e}");
}

#[test]
fn offset_network_gradients() {
    let mut r = rng(14);
    for _ in 0..DRAWS {
        let mut p = AttentionParams::random(2, 2, 2, 3, 1.0, &mut r);
        randomize(&mut p.offset, 0.8, &mut r);
        let x = tensor(&mut r, &[2, 3, 3]);
        let shape = x.shape().to_vec();
        let off = p.offset.clone();
        let full = |o: &dacm::aggregation::OffsetNet| {
            let mut q = p.clone();
            q.offset = o.clone();
            q
        };
        assert_op_gradients(
            "offset_network",
            x.data(),
            &off,
            |xs, o| offset_network(&Tensor::from_vec(&shape, xs.to_vec()).unwrap(), &full(o)).unwrap().into_data(),
            |u| parameter_gradients(AggregationOp::OffsetNetwork { slice: &x, params: &p }, u).unwrap(),
            &mut r,
        );
    }
}

#[test]
fn deformable_attention_gradients() {
    let mut r = rng(15);
    for _ in 0..DRAWS {
        let mut p = AttentionParams::random(2, 2, 2, 3, 1.0, &mut r);
        randomize(&mut p, 0.7, &mut r);
        let x = tensor(&mut r, &[2, 3, 3]);
        let shape = x.shape().to_vec();
        assert_op_gradients(
            "deformable_attention_2d",
            x.data(),
            &p,
            |xs, q| deformable_attention_2d(&Tensor::from_vec(&shape, xs.to_vec()).unwrap(), q).unwrap().into_data(),
            |u| parameter_gradients(AggregationOp::DeformableAttention { slice: &x, params: &p }, u).unwrap(),
            &mut r,
        );
    }
}

#[test]
fn ddt_gradients() {
    let mut r = rng(16);
    for _ in 0..DRAWS {
        let mut p = DdtParams::random(&small_ddt(), 1.0, 1.0, &mut r);
        randomize(&mut p, 0.7, &mut r);
        let v = volume(&mut r, 1, [2, 2, 2, 3]);
        let dims = v.dims();
        assert_op_gradients(
            "ddt_forward",
            v.data(),
            &p,
            |xs, q| ddt_forward(&Volume::new(1, dims, xs.to_vec()).unwrap(), &q.sdt, &q.qdt).unwrap().into_data(),
            |u| parameter_gradients(AggregationOp::Ddt { volume: &v, params: &p }, u).unwrap(),
            &mut r,
        );
    }
}

#[test]
fn sparse_conv_gradients() {
    let mut r = rng(17);
    for _ in 0..DRAWS {
        let mut p = Sparse4dConvParams::random(2, 2, 3, 1.0, &mut r);
        randomize_tensor(&mut p.bias, 0.5, &mut r);
        let v = volume(&mut r, 2, [2, 3, 2, 2]);
        let dims = v.dims();
        assert_op_gradients(
            "sparse_conv4d",
            v.data(),
            &p,
            |xs, q| sparse_conv4d(&Volume::new(2, dims, xs.to_vec()).unwrap(), q).unwrap().into_data(),
            |u| parameter_gradients(AggregationOp::SparseConv4d { volume: &v, params: &p }, u).unwrap(),
            &mut r,
        );
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut r = rng(18);
    let mut att = AttentionParams::random(2, 2, 2, 3, 1.0, &mut r);
    randomize(&mut att, 0.7, &mut r);
    let x = tensor(&mut r, &[2, 3, 3]);
    let mut ddt = DdtParams::random(&small_ddt(), 1.0, 1.0, &mut r);
    randomize(&mut ddt, 0.7, &mut r);
    let v1 = volume(&mut r, 1, [2, 2, 2, 2]);
    let conv = Sparse4dConvParams::random(2, 1, 3, 1.0, &mut r);
    let v2 = volume(&mut r, 2, [2, 2, 2, 2]);
    let ops = [
        AggregationOp::OffsetNetwork { slice: &x, params: &att },
        AggregationOp::DeformableAttention { slice: &x, params: &att },
        AggregationOp::Ddt { volume: &v1, params: &ddt },
        AggregationOp::SparseConv4d { volume: &v2, params: &conv },
    ];
    for op in ops {
        let n = op.forward().unwrap().len();
        let g = parameter_gradients(op, &vec![0.0; n]).unwrap();
        assert!(g.input.iter().all(|&v| v == 0.0), "{}", op.name());
        assert!(g.params.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)), "{}", op.name());
        assert!(parameter_gradients(op, &vec![0.0; n + 1]).is_err());
    }
}
