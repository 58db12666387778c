// temp repro, compiled as a cotlab example
use cotlab::graph::Graph;
use cotlab::tensor::Tensor;

fn main() {
    let x = vec![0.5, -0.3, 0.8, 1.1];        // [2,2]
    let w = vec![0.2, -0.7, 0.4, 0.9, 0.1, -0.5]; // [2,3]
    let wt = vec![0.3, 0.6, -0.2, 0.8, -0.4, 0.25]; // [2,3]
    let bias = vec![0.05, -0.1, 0.2];

    let build = |g: &mut Graph, x_id, w_id, wt_id, b_id| {
        let y = g.matmul(x_id, w_id);
        let yb = g.add_bias(y, b_id);
        let z = g.matmul_nt(yb, wt_id);
        g.sum(z)
    };

    let mut g = Graph::new();
    let xi = g.leaf(Tensor::new(vec![2,2], x.clone()).with_grad());
    let wi = g.leaf(Tensor::new(vec![2,3], w.clone()).with_grad());
    let wti = g.leaf(Tensor::new(vec![2,3], wt.clone()).with_grad());
    let bi = g.leaf(Tensor::new(vec![3], bias.clone()).with_grad());
    let loss = build(&mut g, xi, wi, wti, bi);
    let grads = g.backward(loss).unwrap();

    let eval = |x: &Vec<f64>, w: &Vec<f64>, wt: &Vec<f64>, b: &Vec<f64>| -> f64 {
        let mut g = Graph::eval();
        let xi = g.leaf(Tensor::new(vec![2,2], x.clone()));
        let wi = g.leaf(Tensor::new(vec![2,3], w.clone()));
        let wti = g.leaf(Tensor::new(vec![2,3], wt.clone()));
        let bi = g.leaf(Tensor::new(vec![3], b.clone()));
        let loss = build(&mut g, xi, wi, wti, bi);
        g.value(loss)
    };

    let h = 1e-5;
    let names = ["x", "w", "wt", "b"];
    let sets: Vec<(usize, Vec<f64>)> = vec![(0, x.clone()), (1, w.clone()), (2, wt.clone()), (3, bias.clone())];
    let ids = [xi, wi, wti, bi];
    for (which, vals) in sets {
        let ag = grads.wrt_or_zeros(ids[which]);
        for j in 0..vals.len() {
            let mut xs = [x.clone(), w.clone(), wt.clone(), bias.clone()];
            xs[which][j] += h;
            let fp = eval(&xs[0], &xs[1], &xs[2], &xs[3]);
            xs[which][j] -= 2.0*h;
            let fm = eval(&xs[0], &xs[1], &xs[2], &xs[3]);
            let fd = (fp - fm) / (2.0*h);
            let diff = (ag[j] - fd).abs();
            if diff > 1e-6 { println!("{} coord {}: analytic {} fd {} MISMATCH", names[which], j, ag[j], fd); }
        }
    }
    println!("done");
}
