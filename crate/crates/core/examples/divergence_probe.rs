fn main() {
    use redfuse::sampler::*;
    use redfuse::Matrix;
    use rand::Rng;
    let mut rng = redfuse::seeding::rng(21, "toy-group", 0);
    let images: Vec<Matrix> = (0..3).map(|_| {
        let data: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(2, 3, data).unwrap()
    }).collect();
    let text_data: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g = RedundantGroup::new("g".into(), images, Matrix::from_vec(2, 3, text_data).unwrap(), Some(0)).unwrap();
    let params = ScorerParams::new(3, AttentionScorerParams::identity(3, 1).unwrap()).unwrap();
    let hyper = TrainHyper { lr: f64::MAX, steps: 50, temperature: 1.0, batch: 2 };
    match train_sampler(&[g.clone(), g], &params, &hyper) {
        Ok((p, h)) => println!("OK?? w = {:?} losses tail {:?}", p.w, &h[h.len()-3..]),
        Err(e) => println!("ERR: {e}"),
    }
}
