//! Finite-difference checks of the hand-written gradients.
//!
//!     cargo run --release --example gradient_check

use embl::inversion::{relaxed_loss_grad, sparse_loss_grad, RelaxedObjective};
use embl::numerics::rng::stream;
use embl::numerics::{gradient_check, gradient_check_report, DenseMatrix, ParamBlocks};
use embl::sentence_encoder::{contrastive_loss_grad, Arch, Encoder, EncoderConfig};
use embl::word_embedding::sgns_loss_grad;

fn main() -> embl::Result<()> {
    let mut rng = stream(1, 0);
    let v = DenseMatrix::random_normal(10, 6, 0.4, &mut rng);
    println!("sgns                  {:.2e}", gradient_check(|m| sgns_loss_grad(m, 2, 5, &[1, 7, 9]), &v));

    let batch: Vec<(Vec<usize>, Vec<usize>)> = vec![(vec![1, 2], vec![3, 4, 5]), (vec![6], vec![7, 8]), (vec![9, 2, 3], vec![4])];
    let batch_ref: Vec<(&[usize], &[usize])> = batch.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
    for arch in [Arch::MeanPool, Arch::Recurrent] {
        let enc = Encoder::init(10, &EncoderConfig { arch, d_w: 4, hidden: 5, ..Default::default() });
        let point = DenseMatrix::from_vec(1, enc.params.num_params(), enc.params.flatten())?;
        let mut work = enc.clone();
        let rep = gradient_check_report(
            &mut |p: &DenseMatrix| {
                work.params.assign_flat(p.as_slice());
                let (l, g, _) = contrastive_loss_grad(&work, &batch_ref, &[0, 1, 2], None).unwrap();
                (l, DenseMatrix::from_vec(1, p.len(), g.flatten()).unwrap())
            },
            &point,
            7,
        );
        println!("contrastive {:<10}{:.2e} over {} coordinates", format!("{arch:?}"), rep.max_rel_error, rep.probed);

        let target = enc.encode(&[3, 1, 4])?;
        let z = DenseMatrix::random_normal(3, 10, 0.5, &mut rng);
        let e = gradient_check(|z| relaxed_loss_grad(&enc, z, &target, RelaxedObjective::Direct, 0.5).unwrap(), &z);
        println!("relaxed {:<14}{e:.2e}", format!("{arch:?}"));
    }

    let m = vec![0.2, -0.1, 0.3, 0.0, 0.1, -0.2];
    let z = DenseMatrix::from_vec(10, 1, (0..10).map(|i| 0.1 + 0.05 * i as f64).collect())?;
    let e = gradient_check(|z| {
        let (l, g) = sparse_loss_grad(&v, z.as_slice(), &m, 0.1).unwrap();
        (l, DenseMatrix::from_vec(10, 1, g).unwrap())
    }, &z);
    println!("sparse                {e:.2e}");
    Ok(())
}
