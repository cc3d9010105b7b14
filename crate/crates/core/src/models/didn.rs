//! "DIDN-lite": a down-up CNN with residual blocks at every scale, additive
//! skips across the down/up path and a feature-level global residual from
//! the head to the tail.

use super::{BackboneConfig, Binder};
use crate::conditioning::{adain_graph, ADAIN_EPS};
use crate::graph::{Graph, Var};

const SLOPE: f64 = 0.2;

fn conv_shapes(name: &str, cin: usize, cout: usize, k: usize, out: &mut Vec<(String, Vec<usize>)>) {
    out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
    out.push((format!("{name}.bias"), vec![cout]));
}

fn res_shapes(prefix: &str, ch: usize, out: &mut Vec<(String, Vec<usize>)>) {
    conv_shapes(&format!("{prefix}.conv1"), ch, ch, 3, out);
    conv_shapes(&format!("{prefix}.conv2"), ch, ch, 3, out);
}

pub(super) fn param_shapes(cfg: &BackboneConfig, prefix: &str) -> Vec<(String, Vec<usize>)> {
    let c = cfg.init_channels;
    let p = cfg.num_pools;
    let mut shapes = Vec::new();
    conv_shapes(&format!("{prefix}.head"), 2, c, 3, &mut shapes);
    res_shapes(&format!("{prefix}.enc.0.res"), c, &mut shapes);
    for i in 1..=p {
        conv_shapes(&format!("{prefix}.enc.{i}.down"), c << (i - 1), c << i, 3, &mut shapes);
        res_shapes(&format!("{prefix}.enc.{i}.res"), c << i, &mut shapes);
    }
    res_shapes(&format!("{prefix}.mid.res"), c << p, &mut shapes);
    for i in 1..=p {
        shapes.push((format!("{prefix}.dec.{i}.up.weight"), vec![c << i, c << (i - 1), 2, 2]));
        shapes.push((format!("{prefix}.dec.{i}.up.bias"), vec![c << (i - 1)]));
        res_shapes(&format!("{prefix}.dec.{i}.res"), c << (i - 1), &mut shapes);
    }
    conv_shapes(&format!("{prefix}.tail"), c, 2, 3, &mut shapes);
    shapes
}

fn conv(graph: &mut Graph, binder: &mut Binder<'_>, name: &str, x: Var) -> Var {
    let w = binder.var(graph, &format!("{name}.weight"));
    let b = binder.var(graph, &format!("{name}.bias"));
    graph.conv2d(x, w, Some(b), 1)
}

/// `x + conv2(lrelu(conv1(x)))`
fn res_block(graph: &mut Graph, binder: &mut Binder<'_>, prefix: &str, x: Var) -> Var {
    let h = conv(graph, binder, &format!("{prefix}.conv1"), x);
    let h = graph.leaky_relu(h, SLOPE);
    let h = conv(graph, binder, &format!("{prefix}.conv2"), h);
    graph.add(x, h)
}

pub(super) fn forward(
    cfg: &BackboneConfig,
    graph: &mut Graph,
    binder: &mut Binder<'_>,
    prefix: &str,
    x: Var,
    cond: Option<(Var, Var)>,
) -> Var {
    let p = cfg.num_pools;
    let head = conv(graph, binder, &format!("{prefix}.head"), x);
    let head = graph.leaky_relu(head, SLOPE);

    let mut encoded = vec![res_block(graph, binder, &format!("{prefix}.enc.0.res"), head)];
    for i in 1..=p {
        let pooled = graph.avg_pool2(encoded[i - 1]);
        let h = conv(graph, binder, &format!("{prefix}.enc.{i}.down"), pooled);
        let h = graph.leaky_relu(h, SLOPE);
        encoded.push(res_block(graph, binder, &format!("{prefix}.enc.{i}.res"), h));
    }

    let mut h = res_block(graph, binder, &format!("{prefix}.mid.res"), encoded[p]);
    if let Some((gamma, beta)) = cond {
        h = adain_graph(graph, h, gamma, beta, ADAIN_EPS);
    }

    for i in (1..=p).rev() {
        let w = binder.var(graph, &format!("{prefix}.dec.{i}.up.weight"));
        let b = binder.var(graph, &format!("{prefix}.dec.{i}.up.bias"));
        let up = graph.conv_transpose2(h, w, Some(b));
        let up = graph.leaky_relu(up, SLOPE);
        let merged = graph.add(up, encoded[i - 1]);
        h = res_block(graph, binder, &format!("{prefix}.dec.{i}.res"), merged);
    }

    let h = graph.add(h, head);
    conv(graph, binder, &format!("{prefix}.tail"), h)
}
