use ni_core::tensor::{Storage, Tape};
use std::time::Instant;

fn bench(name: &str, iters: usize, mut f: impl FnMut()) {
    let t0 = Instant::now();
    for _ in 0..iters { f(); }
    println!("{name:34} {:8.3} ms", t0.elapsed().as_secs_f64() * 1e3 / iters as f64);
}

fn main() {
    let (b, u, h, s, d, dk) = (128usize, 4, 1, 13, 64, 32);
    let big = Storage::full(&[b, u, s, d], 0.5);
    let modv = Storage::full(&[u, 1, d], 0.3);
    let w = Storage::full(&[dk, d], 0.1);
    let logits = Storage::full(&[b, u, h, s, s], 0.2);
    let rows = Storage::full(&[b, u, h, s, 1], 1.1);
    let gamma = Storage::full(&[d], 1.0);
    let beta = Storage::full(&[d], 0.0);

    bench("zeros 425k", 50, || { let z = Storage::zeros(&[b, u, s, d]); std::hint::black_box(z); });
    bench("mul same-shape 425k", 50, || {
        let t = Tape::new();
        let x = t.constant(big.clone());
        let y = x.mul(&x).unwrap();
        std::hint::black_box(y);
    });
    bench("mul bcast mod [U,1,d]", 50, || {
        let t = Tape::new();
        let x = t.constant(big.clone());
        let m = t.constant(modv.clone());
        std::hint::black_box(x.mul(&m).unwrap());
    });
    bench("matmul_nt fold [B*U*S,64]x[32,64]", 50, || {
        let t = Tape::new();
        let x = t.constant(big.clone());
        let wt = t.constant(w.clone());
        std::hint::black_box(x.matmul_nt(&wt).unwrap());
    });
    bench("layer_norm 425k", 50, || {
        let t = Tape::new();
        let x = t.constant(big.clone());
        let g = t.constant(gamma.clone());
        let be = t.constant(beta.clone());
        std::hint::black_box(x.layer_norm(&g, &be).unwrap());
    });
    bench("softmax [B,U,H,S,S]", 50, || {
        let t = Tape::new();
        let x = t.constant(logits.clone());
        std::hint::black_box(x.softmax(4).unwrap());
    });
    bench("div rows [B,U,H,S,S]/[...,1]", 50, || {
        let t = Tape::new();
        let x = t.constant(logits.clone());
        let r = t.constant(rows.clone());
        std::hint::black_box(x.div(&r).unwrap());
    });
    bench("qk^T batched", 50, || {
        let t = Tape::new();
        let q = t.constant(Storage::full(&[b, u, h, s, dk], 0.2));
        let k = t.constant(Storage::full(&[b, u, h, s, dk], 0.3));
        std::hint::black_box(q.matmul_nt(&k).unwrap());
    });
    bench("gelu 425k", 50, || {
        let t = Tape::new();
        let x = t.constant(big.clone());
        std::hint::black_box(x.gelu().unwrap());
    });
    bench("clone Storage 425k (leaf bind)", 50, || {
        std::hint::black_box(big.clone());
    });
    bench("sum axis1 [B,U,S,d]", 50, || {
        let t = Tape::new();
        let x = t.constant(big.clone());
        std::hint::black_box(x.sum(Some(1)).unwrap());
    });
    bench("permute fold-heads", 50, || {
        let t = Tape::new();
        let x = t.constant(Storage::full(&[b, u, h, s, dk], 0.2));
        std::hint::black_box(x.permute(&[0, 1, 3, 2, 4]).unwrap());
    });
    bench("concat heads h=1", 50, || {
        let t = Tape::new();
        let x = t.constant(Storage::full(&[b, u, 1, s, dk], 0.2));
        std::hint::black_box(ni_core::tensor::Tensor::concat(&[&x], 2).unwrap());
    });
}
