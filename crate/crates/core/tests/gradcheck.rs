mod common;

use common::{away_from_zero, check_gradients, project, rng, GRAD_REL_TOL};
use sggan_core::autograd::{Activation, Graph, Var};
use sggan_core::mmd::{mmd2, Kernel};
use sggan_core::ssl_loss::{discriminator_loss_graph, generator_loss, real_class_scores, MatchMetric};
use sggan_core::Tensor;

fn assert_grad(name: &str, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let r = check_gradients(inputs, f);
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(r.worst_rel < GRAD_REL_TOL, "{name}: worst relative error {:.3e}", r.worst_rel);
}

#[test]
fn elementwise_ops() {
    let mut r = rng(1);
    let a = away_from_zero(&[3, 4], 0.1, 1.5, &mut r);
    let b = away_from_zero(&[3, 4], 0.1, 1.5, &mut r);
    assert_grad("add", &[a.clone(), b.clone()], |g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        project(g, y, 7)
    });
    assert_grad("sub", &[a.clone(), b.clone()], |g, v| {
        let y = g.sub(v[0], v[1]).unwrap();
        project(g, y, 8)
    });
    assert_grad("mul", &[a.clone(), b.clone()], |g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        project(g, y, 9)
    });
    assert_grad("scale", std::slice::from_ref(&a), |g, v| {
        let y = g.scale(v[0], -2.5);
        project(g, y, 10)
    });
    let c = Tensor::randn(&[3, 4], 1.0, &mut r);
    assert_grad("mul_const", std::slice::from_ref(&a), |g, v| {
        let y = g.mul_const(v[0], c.clone()).unwrap();
        project(g, y, 11)
    });
    assert_grad("softplus", std::slice::from_ref(&a), |g, v| {
        let y = g.softplus(v[0]);
        project(g, y, 12)
    });
    assert_grad("abs", std::slice::from_ref(&a), |g, v| {
        let y = g.abs(v[0]);
        project(g, y, 13)
    });
    for (i, kind) in [Activation::Relu, Activation::LeakyRelu(0.2), Activation::Tanh].into_iter().enumerate() {
        assert_grad(&format!("{kind:?}"), std::slice::from_ref(&a), |g, v| {
            let y = g.activation(v[0], kind);
            project(g, y, 20 + i as u64)
        });
    }
}

#[test]
fn shape_and_reduction_ops() {
    let mut r = rng(2);
    let a = away_from_zero(&[3, 4], 0.1, 1.5, &mut r);
    let b = away_from_zero(&[4, 5], 0.1, 1.5, &mut r);
    let bias = away_from_zero(&[4], 0.1, 1.0, &mut r);
    assert_grad("matmul", &[a.clone(), b], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        project(g, y, 1)
    });
    assert_grad("transpose", std::slice::from_ref(&a), |g, v| {
        let y = g.transpose(v[0]).unwrap();
        project(g, y, 2)
    });
    assert_grad("reshape", std::slice::from_ref(&a), |g, v| {
        let y = g.reshape(v[0], &[2, 6]).unwrap();
        project(g, y, 3)
    });
    assert_grad("add_bias", &[a.clone(), bias], |g, v| {
        let y = g.add_bias(v[0], v[1]).unwrap();
        project(g, y, 4)
    });
    assert_grad("sum", std::slice::from_ref(&a), |g, v| {
        let y = g.sum(v[0]);
        g.scale(y, 0.7)
    });
    assert_grad("mean", std::slice::from_ref(&a), |g, v| {
        let y = g.mean(v[0]);
        g.scale(y, 1.3)
    });
    for axis in 0..2 {
        assert_grad("sum_axis", std::slice::from_ref(&a), |g, v| {
            let y = g.sum_axis(v[0], axis).unwrap();
            project(g, y, 5)
        });
        assert_grad("log_sum_exp", std::slice::from_ref(&a), |g, v| {
            let y = g.log_sum_exp(v[0], axis).unwrap();
            project(g, y, 6)
        });
    }
}

#[test]
fn convolutions() {
    let mut r = rng(3);
    for (stride, k, pad) in [(1, 3, 1), (2, 3, 1), (2, 5, 2), (1, 1, 0)] {
        let x = away_from_zero(&[2, 2, 5, 5], 0.1, 1.0, &mut r);
        let w = away_from_zero(&[3, 2, k, k], 0.1, 1.0, &mut r);
        assert_grad("conv2d", &[x, w], |g, v| {
            let y = g.conv2d(v[0], v[1], stride, pad).unwrap();
            project(g, y, 30)
        });
        let x = away_from_zero(&[2, 3, 3, 3], 0.1, 1.0, &mut r);
        let w = away_from_zero(&[3, 2, k, k], 0.1, 1.0, &mut r);
        assert_grad("conv_transpose2d", &[x, w], |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], stride, pad).unwrap();
            project(g, y, 31)
        });
    }
}

#[test]
fn normalization_and_pooling() {
    let mut r = rng(4);
    let x = away_from_zero(&[3, 2, 4, 4], 0.1, 2.0, &mut r);
    let gamma = away_from_zero(&[2], 0.5, 1.5, &mut r);
    let beta = away_from_zero(&[2], 0.1, 1.0, &mut r);
    assert_grad("batch_norm(batch)", &[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], None).unwrap();
        project(g, y, 40)
    });
    let (m, s) = ([0.3, -0.2], [1.4, 0.6]);
    assert_grad("batch_norm(running)", &[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], Some((&m, &s))).unwrap();
        project(g, y, 41)
    });
    let flat = away_from_zero(&[5, 3], 0.1, 2.0, &mut r);
    let (g3, b3) = (away_from_zero(&[3], 0.5, 1.5, &mut r), away_from_zero(&[3], 0.1, 1.0, &mut r));
    assert_grad("batch_norm(2d)", &[flat, g3, b3], |g, v| {
        let (y, _) = g.batch_norm(v[0], v[1], v[2], None).unwrap();
        project(g, y, 42)
    });
    assert_grad("global_avg_pool", std::slice::from_ref(&x), |g, v| {
        let y = g.global_avg_pool(v[0]).unwrap();
        project(g, y, 43)
    });
    assert_grad("avg_pool2", std::slice::from_ref(&x), |g, v| {
        let y = g.avg_pool2(v[0]).unwrap();
        project(g, y, 44)
    });
    assert_grad("pad_channels", &[x], |g, v| {
        let y = g.pad_channels(v[0], 5).unwrap();
        project(g, y, 45)
    });
}

#[test]
fn gram_matrices() {
    let mut r = rng(5);
    let x = away_from_zero(&[4, 3], 0.1, 1.0, &mut r);
    let y = away_from_zero(&[5, 3], 0.1, 1.0, &mut r);
    for kernel in [Kernel::InnerProduct, Kernel::gaussian(0.8).unwrap()] {
        assert_grad("gram", &[x.clone(), y.clone()], |g, v| {
            let k = g.gram(v[0], v[1], kernel).unwrap();
            project(g, k, 50)
        });
        assert_grad("gram(self)", std::slice::from_ref(&x), |g, v| {
            let k = g.gram(v[0], v[0], kernel).unwrap();
            project(g, k, 51)
        });
    }
}

#[test]
fn mmd_and_l1_matching() {
    let mut r = rng(6);
    let real = away_from_zero(&[6, 4], 0.1, 1.0, &mut r);
    let fake = away_from_zero(&[5, 4], 0.1, 1.0, &mut r);
    for kernel in [Kernel::InnerProduct, Kernel::gaussian(1.1).unwrap()] {
        assert_grad("mmd2", &[real.clone(), fake.clone()], |g, v| mmd2(g, v[0], v[1], kernel).unwrap());
    }
    assert_grad("l1", &[real, fake], |g, v| generator_loss(g, v[0], v[1], MatchMetric::L1).unwrap());
}

#[test]
fn composite_discriminator_and_generator_objective() {
    let mut r = rng(7);
    let k = 4;
    let lab = away_from_zero(&[3, k + 1], 0.1, 2.0, &mut r);
    let unl = away_from_zero(&[4, k + 1], 0.1, 2.0, &mut r);
    let gen = away_from_zero(&[5, k + 1], 0.1, 2.0, &mut r);
    let labels = [0, 3, 2];
    assert_grad("discriminator loss", &[lab, unl, gen], |g, v| {
        let l = real_class_scores(g, v[0]).unwrap();
        let u = real_class_scores(g, v[1]).unwrap();
        let z = real_class_scores(g, v[2]).unwrap();
        discriminator_loss_graph(g, l, &labels, u, z).unwrap().total
    });

    // End to end: features from a conv trunk feed both objectives.
    let x = away_from_zero(&[3, 2, 4, 4], 0.1, 1.0, &mut r);
    let xf = away_from_zero(&[3, 2, 4, 4], 0.1, 1.0, &mut r);
    let w = away_from_zero(&[3, 2, 3, 3], 0.1, 0.8, &mut r);
    let head = away_from_zero(&[3, 3], 0.1, 0.8, &mut r);
    assert_grad("trunk composite", &[x, xf, w, head], |g, v| {
        let trunk = |g: &mut Graph, input: Var| {
            let h = g.conv2d(input, v[2], 1, 1).unwrap();
            let h = g.activation(h, Activation::LeakyRelu(0.2));
            g.global_avg_pool(h).unwrap()
        };
        let fr = trunk(g, v[0]);
        let ff = trunk(g, v[1]);
        let lr = g.matmul(fr, v[3]).unwrap();
        let lf = g.matmul(ff, v[3]).unwrap();
        let sr = real_class_scores(g, lr).unwrap();
        let sf = real_class_scores(g, lf).unwrap();
        let d = discriminator_loss_graph(g, sr, &[1, 0, 1], sr, sf).unwrap().total;
        let m = generator_loss(g, fr, ff, MatchMetric::Mmd(Kernel::gaussian(0.5).unwrap())).unwrap();
        g.add(d, m).unwrap()
    });
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut store = sggan_core::ParamStore::new();
    let id = store.add("w", Tensor::from_vec(vec![1.0, 2.0]), true).unwrap();
    let mut g = Graph::new();
    let w = g.param(&store, id, false);
    let x = g.leaf(Tensor::from_vec(vec![3.0, 4.0]));
    let y = g.mul(w, x).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(w).is_none());
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 2.0]);
}
