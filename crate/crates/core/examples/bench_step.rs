use ssattn_core::attention::{IrmAblation, SamplingVariant};
use ssattn_core::model::{train_step, Adam, Model, ModelConfig, TrainConfig};
use ssattn_core::params::ParamStore;
use ssattn_core::rng::{rng_from_seed, uniform};
use ssattn_core::tensor::Tensor;

fn main() {
    let cfg = ModelConfig::default();
    let mut rng = rng_from_seed(1);
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, &cfg, SamplingVariant::Ssa, &mut rng).unwrap();
    println!("params: {} tensors, {} scalars", store.len(), store.total_elements());
    let tcfg = TrainConfig::default();
    let mut adam = Adam::new(&store, &tcfg);
    let mut drng = rng_from_seed(2);
    let clean = Tensor::from_fn(vec![3, 64, 64], |_| uniform(&mut drng, 0.1, 0.9));
    let rain = Tensor::from_fn(vec![3, 64, 64], |i| (clean.data()[i] + uniform(&mut drng, 0.0, 0.3)).min(1.0));
    let batch = vec![(rain, clean)];
    let t0 = std::time::Instant::now();
    let n = 20;
    for step in 0..n {
        let s = train_step(&model, &mut store, &mut adam, &batch, step, &tcfg, &IrmAblation::default()).unwrap();
        if step == 0 || step == n-1 { println!("step {step}: loss {:.4}", s.total); }
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("{:.3} s/step -> 2000 steps = {:.1} min", dt / n as f64, dt / n as f64 * 2000.0 / 60.0);
}
