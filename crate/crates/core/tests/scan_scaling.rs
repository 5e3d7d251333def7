//! Wall-clock scaling of one convmamba block. Kept in its own binary so no
//! other test competes for the CPU while it measures.
//!
//! glibc hands out fresh zeroed pages for every large buffer, which adds a
//! page-fault cost that jumps once activations cross its mmap threshold.
//! A caching allocator keeps the measurement about the compute.

use std::time::Instant;

use dmf2mel::convmamba::{ConvMambaBlock, ConvMambaConfig};
use dmf2mel::{ParamStore, Rng, Tape, Tensor};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn runtime_is_linear_in_length() {
    let cfg = ConvMambaConfig::new(16);
    let m = ConvMambaBlock::new("cm", &cfg);
    let mut ps = ParamStore::<f32>::new();
    m.init(&mut ps, &mut Rng::new(26));
    let time = |len: usize| {
        let x = Tensor::from_fn(&[2, len, 16], |i| ((i % 13) as f32 - 6.0) * 0.1);
        median(
            (0..20)
                .map(|_| {
                    let start = Instant::now();
                    let mut t = Tape::new();
                    let xv = t.constant(x.clone());
                    let y = m.forward(&mut t, &ps, xv);
                    let s = t.sum_all(y);
                    let _ = t.backward(s);
                    start.elapsed().as_secs_f64()
                })
                .collect(),
        )
    };
    time(256);
    let ratio = time(2048) / time(1024);
    assert!(ratio <= 2.6, "ratio {ratio}");
}
