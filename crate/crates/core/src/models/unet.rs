//! U-Net with instance-normalized conv blocks, average pooling and
//! transposed-convolution upsampling.

use super::{BackboneConfig, Binder};
use crate::conditioning::{adain_graph, ADAIN_EPS};
use crate::graph::{Graph, Var};

const SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-5;

fn block_shapes(prefix: &str, cin: usize, cout: usize, out: &mut Vec<(String, Vec<usize>)>) {
    out.push((format!("{prefix}.conv1.weight"), vec![cout, cin, 3, 3]));
    out.push((format!("{prefix}.conv2.weight"), vec![cout, cout, 3, 3]));
}

pub(super) fn param_shapes(cfg: &BackboneConfig, prefix: &str) -> Vec<(String, Vec<usize>)> {
    let c = cfg.init_channels;
    let p = cfg.num_pools;
    let mut shapes = Vec::new();
    for i in 0..p {
        let cin = if i == 0 { 2 } else { c << (i - 1) };
        block_shapes(&format!("{prefix}.down.{i}"), cin, c << i, &mut shapes);
    }
    block_shapes(&format!("{prefix}.bottleneck"), c << (p - 1), c << p, &mut shapes);
    for i in 0..p {
        let cin = c << (p - i);
        let cout = cin / 2;
        shapes.push((format!("{prefix}.up.{i}.tconv.weight"), vec![cin, cout, 2, 2]));
        block_shapes(&format!("{prefix}.up.{i}"), cin, cout, &mut shapes);
    }
    shapes.push((format!("{prefix}.out.weight"), vec![2, c, 1, 1]));
    shapes.push((format!("{prefix}.out.bias"), vec![2]));
    shapes
}

fn norm_act(graph: &mut Graph, x: Var) -> Var {
    let n = graph.instance_norm(x, NORM_EPS);
    graph.leaky_relu(n, SLOPE)
}

fn conv_block(graph: &mut Graph, binder: &mut Binder<'_>, prefix: &str, x: Var) -> Var {
    let w1 = binder.var(graph, &format!("{prefix}.conv1.weight"));
    let h = graph.conv2d(x, w1, None, 1);
    let h = norm_act(graph, h);
    let w2 = binder.var(graph, &format!("{prefix}.conv2.weight"));
    let h = graph.conv2d(h, w2, None, 1);
    norm_act(graph, h)
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
    let mut skips = Vec::with_capacity(p);
    let mut h = x;
    for i in 0..p {
        h = conv_block(graph, binder, &format!("{prefix}.down.{i}"), h);
        skips.push(h);
        h = graph.avg_pool2(h);
    }
    h = conv_block(graph, binder, &format!("{prefix}.bottleneck"), h);
    if let Some((gamma, beta)) = cond {
        h = adain_graph(graph, h, gamma, beta, ADAIN_EPS);
    }
    for i in 0..p {
        let w = binder.var(graph, &format!("{prefix}.up.{i}.tconv.weight"));
        let up = graph.conv_transpose2(h, w, None);
        let up = norm_act(graph, up);
        let skip = skips.pop().expect("one skip per level");
        let cat = graph.concat(up, skip);
        h = conv_block(graph, binder, &format!("{prefix}.up.{i}"), cat);
    }
    let w = binder.var(graph, &format!("{prefix}.out.weight"));
    let b = binder.var(graph, &format!("{prefix}.out.bias"));
    graph.conv2d(h, w, Some(b), 0)
}
