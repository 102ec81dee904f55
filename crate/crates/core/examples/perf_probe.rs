fn main() {
    let m = fedcache_core::models::DenoiserModel::build(16, 5).unwrap();
    println!("param_count = {}", m.param_count());
    // quick speed probe: forward+backward of a batch of 32
    use fedcache_core::{Tensor, ParameterSet};
    let mut rng = fedcache_core::rng::rng_from(1, &[]);
    let x = Tensor::randn(vec![32, 16], &mut rng);
    let t: Vec<usize> = (0..32).map(|i| 1 + (i % 50)).collect();
    let mut params = m.params.clone();
    let start = std::time::Instant::now();
    let iters = 100;
    for _ in 0..iters {
        let (y, mut tape) = m.graph.forward(&params, &x, Some(&t)).unwrap();
        let dy = Tensor::full(y.shape().to_vec(), 1e-3);
        m.graph.backward(&mut params, &mut tape, &dy).unwrap();
    }
    let dt = start.elapsed().as_secs_f64();
    println!("fwd+bwd batch32: {:.2} ms/iter ({:.0} iters/s)", dt * 1000.0 / iters as f64, iters as f64 / dt);
    let _ = params;
}
