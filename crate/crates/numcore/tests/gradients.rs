use numcore::nn::{self, AttentionSpec, Ctx};
use numcore::{grad_check, grad_check_params, ConvPadding, Graph, Layout, SeedRng, Tensor};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SeedRng::new(seed);
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Fixed random weights so that reductions do not hide errors behind
/// symmetric gradients.
fn weighted_sum(g: &Graph, y: numcore::Var, seed: u64) -> numcore::Result<numcore::Var> {
    let w = g.constant(random(&g.shape(y), seed ^ 0xabcdef));
    Ok(g.sum(g.mul(y, w)?))
}

fn check(
    name: &str,
    shape: &[usize],
    f: impl Fn(&Graph, numcore::Var) -> numcore::Result<numcore::Var>,
) {
    let err = grad_check(f, &random(shape, name.len() as u64 * 31), EPS).unwrap();
    assert!(err < TOL, "{name}: relative error {err}");
}

#[test]
fn matmul_sum_example() {
    let b = random(&[2, 2], 4);
    let err = grad_check(
        |g, x| Ok(g.sum(g.matmul(x, g.constant(b.clone()))?)),
        &random(&[2, 2], 3),
        EPS,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn softmax_cross_entropy_example() {
    let err = grad_check(
        |g, x| {
            let lp = g.log_softmax_rows(x);
            Ok(g.neg(g.pick(lp, &[(0, 1)])?))
        },
        &Tensor::from_vec(&[1, 3], vec![0.3, -1.2, 2.0]),
        EPS,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn elementwise_primitives() {
    check("sigmoid", &[3, 4], |g, x| weighted_sum(g, g.sigmoid(x), 1));
    check("tanh", &[3, 4], |g, x| weighted_sum(g, g.tanh(x), 2));
    check("swish", &[3, 4], |g, x| weighted_sum(g, g.swish(x), 3));
    check("exp", &[2, 3], |g, x| weighted_sum(g, g.exp(x), 4));
    check("square", &[2, 3], |g, x| weighted_sum(g, g.square(x), 5));
    check("ln", &[2, 3], |g, x| {
        weighted_sum(g, g.ln(g.add_scalar(g.square(x), 1.0)), 6)
    });
}

#[test]
fn matrix_primitives() {
    let b = random(&[4, 5], 9);
    check("matmul_left", &[3, 4], |g, x| {
        weighted_sum(g, g.matmul(x, g.constant(b.clone()))?, 7)
    });
    let a = random(&[3, 4], 10);
    check("matmul_right", &[4, 5], |g, x| {
        weighted_sum(g, g.matmul(g.constant(a.clone()), x)?, 8)
    });
    let c = random(&[6, 4], 11);
    check("matmul_nt", &[3, 4], |g, x| {
        weighted_sum(g, g.matmul_nt(x, g.constant(c.clone()))?, 9)
    });
    check("transpose", &[3, 4], |g, x| {
        weighted_sum(g, g.transpose(x)?, 10)
    });
    let row = random(&[4], 12);
    check("add_row", &[3, 4], |g, x| {
        weighted_sum(g, g.add_row(x, g.constant(row.clone()))?, 11)
    });
    check("mul_row", &[4], |g, x| {
        weighted_sum(g, g.mul_row(g.constant(a.clone()), x)?, 12)
    });
    check("outer_add", &[3, 4], |g, x| {
        let d = g.constant(random(&[2, 4], 13));
        weighted_sum(g, g.outer_add(x, d)?, 13)
    });
}

#[test]
fn normalization_and_softmax() {
    check("softmax", &[3, 5], |g, x| {
        weighted_sum(g, g.softmax_rows(x), 14)
    });
    check("log_softmax", &[3, 5], |g, x| {
        weighted_sum(g, g.log_softmax_rows(x), 15)
    });
    check("layer_norm", &[3, 6], |g, x| {
        weighted_sum(g, g.layer_norm_rows(x, 1e-6), 16)
    });
    check("batch_norm", &[6, 3], |g, x| {
        let (y, _, _) = g.batch_norm_rows(x, 4, 1e-5)?;
        weighted_sum(g, y, 17)
    });
    check("glu", &[3, 6], |g, x| weighted_sum(g, g.glu(x)?, 18));
    check("l2_normalize", &[3, 4], |g, x| {
        weighted_sum(g, g.l2_normalize_rows(x, 1e-8), 19)
    });
}

#[test]
fn convolutions() {
    let w = random(&[3, 4], 20);
    let b = random(&[4], 21);
    for padding in [ConvPadding::Zero, ConvPadding::Circular] {
        check("depthwise_input", &[6, 4], |g, x| {
            let y = g.depthwise_conv1d(x, g.constant(w.clone()), g.constant(b.clone()), padding)?;
            weighted_sum(g, y, 22)
        });
    }
    let x0 = random(&[6, 4], 23);
    check("depthwise_weight", &[3, 4], |g, w| {
        let y = g.depthwise_conv1d(
            g.constant(x0.clone()),
            w,
            g.constant(b.clone()),
            ConvPadding::Zero,
        )?;
        weighted_sum(g, y, 24)
    });

    let cw = random(&[3, 2, 3, 3], 25);
    let cb = random(&[3], 26);
    for stride in [(2, 2), (1, 2)] {
        check("conv2d_input", &[2, 7, 5], |g, x| {
            let y = g.conv2d(x, g.constant(cw.clone()), g.constant(cb.clone()), stride)?;
            weighted_sum(g, y, 27)
        });
    }
    let cx = random(&[2, 7, 5], 28);
    check("conv2d_weight", &[3, 2, 3, 3], |g, w| {
        let y = g.conv2d(g.constant(cx.clone()), w, g.constant(cb.clone()), (2, 2))?;
        weighted_sum(g, y, 29)
    });
}

#[test]
fn indexing_primitives() {
    check("embedding", &[5, 3], |g, table| {
        weighted_sum(g, g.gather_rows(table, &[4, 0, 4, 2])?, 30)
    });
    check("gather_flat", &[2, 3], |g, x| {
        weighted_sum(g, g.gather_flat(x, &[0, 5, 5, 1], &[2, 2])?, 31)
    });
    check("slices", &[4, 6], |g, x| {
        let a = g.slice_cols(x, 1, 4)?;
        let b = g.slice_rows(x, 2, 4)?;
        let c = g.concat_rows(&[a, g.slice_cols(b, 0, 3)?])?;
        weighted_sum(g, g.concat_cols(&[c, c])?, 32)
    });
    check("replace_rows", &[4, 3], |g, x| {
        let v = g.slice_rows(x, 0, 1)?;
        let v = g.reshape(v, &[3])?;
        weighted_sum(g, g.replace_rows(x, &[1, 3], v)?, 33)
    });
    check("zero_rows_from", &[4, 3], |g, x| {
        weighted_sum(g, g.zero_rows_from(x, 2)?, 34)
    });
    check("swap_axes01", &[2, 3, 4], |g, x| {
        weighted_sum(g, g.swap_axes01(x)?, 35)
    });
}

#[test]
fn lstm_cell_gradient() {
    let mut layout = Layout::new();
    nn::lstm_layout(&mut layout, "lstm", 3, 4);
    layout.push("x", &[1, 3], numcore::Init::Normal(1.0));
    layout.push("h", &[1, 4], numcore::Init::Normal(1.0));
    layout.push("c", &[1, 4], numcore::Init::Normal(1.0));
    let mut store = layout.instantiate(41);
    *store.get_mut("lstm/bias").unwrap() = random(&[16], 42);
    let err = grad_check_params(
        &store,
        |g, s| {
            let ctx = Ctx::new(g, s, true);
            let (h, c) = nn::lstm_cell(&ctx, "lstm", ctx.p("x")?, ctx.p("h")?, ctx.p("c")?)?;
            let hv = weighted_sum(g, h, 43)?;
            let cv = weighted_sum(g, c, 44)?;
            g.add(hv, cv)
        },
        EPS,
        None,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn attention_layer_gradient() {
    let spec = AttentionSpec {
        n_heads: 2,
        causal: false,
        rel_radius: Some(2),
        window: None,
    };
    let mut layout = Layout::new();
    nn::attention_layout(&mut layout, "att", 4, spec);
    layout.push("x", &[5, 4], numcore::Init::Normal(1.0));
    let mut store = layout.instantiate(50);
    *store.get_mut("att/rel_bias").unwrap() = random(&[2, 5], 51);
    let err = grad_check_params(
        &store,
        |g, s| {
            let ctx = Ctx::new(g, s, true);
            let y = nn::self_attention(&ctx, "att", ctx.p("x")?, 0..4, spec)?;
            weighted_sum(g, y, 52)
        },
        EPS,
        None,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn raw_lstm_matches_graph_lstm() {
    let mut layout = Layout::new();
    nn::lstm_layout(&mut layout, "lstm", 3, 4);
    let store = layout.instantiate(60);
    let x = random(&[1, 3], 61);
    let h = random(&[1, 4], 62);
    let c = random(&[1, 4], 63);
    let g = Graph::inference();
    let ctx = Ctx::new(&g, &store, false);
    let (hg, cg) = nn::lstm_cell(
        &ctx,
        "lstm",
        g.constant(x.clone()),
        g.constant(h.clone()),
        g.constant(c.clone()),
    )
    .unwrap();
    let (hr, cr) = nn::lstm_step_raw(&store, "lstm", x.data(), h.data(), c.data()).unwrap();
    assert!(g.value(hg).max_abs_diff(&Tensor::from_vec(&[1, 4], hr)) < 1e-14);
    assert!(g.value(cg).max_abs_diff(&Tensor::from_vec(&[1, 4], cr)) < 1e-14);
}
