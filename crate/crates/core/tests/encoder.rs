mod common;

use common::{add, conv_named, randn, randomize_biases, rng};
use stereodrop::encoder::{Encoder, EncoderConfig, FeaturePyramid};
use stereodrop::{Graph, ParamStore, Tensor};

fn small() -> Encoder {
    Encoder::new(EncoderConfig { stem: 4, channels: [3, 4, 5] })
}

fn run(enc: &Encoder, p: &ParamStore<f64>, img: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let x = g.constant(img.clone());
    let pyr = enc.encode(&mut g, &b, x).unwrap();
    pyr.levels.iter().map(|v| g.value(*v).clone()).collect()
}

fn relu(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(|v| v.max(0.0))
}

#[test]
fn level_shapes_follow_strides() {
    let enc = Encoder::new(EncoderConfig::default());
    let mut p = ParamStore::<f64>::new();
    enc.init(&mut p, &mut rng(0));
    let img = Tensor::from_fn(&[1, 3, 48, 96], |i| (i % 7) as f64 / 7.0);
    let levels = run(&enc, &p, &img);
    assert_eq!(levels[0].shape(), &[1, 16, 12, 24]);
    assert_eq!(levels[1].shape(), &[1, 32, 6, 12]);
    assert_eq!(levels[2].shape(), &[1, 64, 3, 6]);
    assert_eq!([1, 2, 3].map(FeaturePyramid::stride), [4, 8, 16]);
}

#[test]
fn matches_layer_by_layer_oracle() {
    let enc = small();
    for seed in 0..4 {
        let mut p = ParamStore::new();
        enc.init(&mut p, &mut rng(seed));
        randomize_biases(&mut p, seed + 7);
        let img = randn(&[2, 3, 32, 16], seed + 100);
        let got = run(&enc, &p, &img);
        let mut x = relu(&conv_named(&p, "enc.stem", &img, 2, 1, 1));
        for l in 1..=3 {
            let d = relu(&conv_named(&p, &format!("enc.l{l}.down"), &x, 2, 1, 1));
            let a = relu(&conv_named(&p, &format!("enc.l{l}.res.a"), &d, 1, 1, 1));
            x = add(&d, &conv_named(&p, &format!("enc.l{l}.res.b"), &a, 1, 1, 1));
            assert!(got[l - 1].max_abs_diff(&x).unwrap() <= 1e-12, "seed {seed} level {l}");
        }
    }
}

#[test]
fn identical_views_give_identical_pyramids() {
    let enc = small();
    let mut p = ParamStore::new();
    enc.init(&mut p, &mut rng(1));
    let img = randn(&[1, 3, 16, 32], 2);
    assert_eq!(run(&enc, &p, &img), run(&enc, &p, &img.clone()));
}

#[test]
fn zero_image_with_zero_biases_is_zero() {
    let enc = small();
    let mut p = ParamStore::new();
    enc.init(&mut p, &mut rng(1));
    for level in run(&enc, &p, &Tensor::zeros(&[1, 3, 16, 16])) {
        assert!(level.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn rejects_dims_off_the_grid() {
    let enc = small();
    let mut p = ParamStore::<f64>::new();
    enc.init(&mut p, &mut rng(1));
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(&[1, 3, 20, 32]));
    let err = enc.encode(&mut g, &b, x).unwrap_err().to_string();
    assert!(err.contains("pad by 0 columns and 12 rows"), "{err}");
    let grey = g.constant(Tensor::zeros(&[1, 1, 16, 16]));
    assert!(enc.encode(&mut g, &b, grey).is_err());
}

#[test]
fn pixel_changes_stay_inside_receptive_field() {
    let enc = small();
    let mut p = ParamStore::new();
    enc.init(&mut p, &mut rng(3));
    // positive biases keep every unit active so each path can carry the change
    for (name, t) in p.iter_mut() {
        if name.ends_with(".b") {
            *t = Tensor::full(t.shape(), 2.0);
        }
    }
    let img = randn(&[1, 3, 64, 64], 5).map(|v| 0.5 + 0.1 * v);
    let (py, px) = (37, 20);
    let mut bumped = img.clone();
    for c in 0..3 {
        bumped.set4(0, c, py, px, img.at4(0, c, py, px) + 0.5);
    }
    let (a, b) = (run(&enc, &p, &img), run(&enc, &p, &bumped));
    for l in 1..=3 {
        let (_, c, h, w) = a[l - 1].dims4().unwrap();
        let mut changed = 0;
        for y in 0..h {
            for x in 0..w {
                let differs = (0..c).any(|ch| a[l - 1].at4(0, ch, y, x) != b[l - 1].at4(0, ch, y, x));
                let (ylo, yhi) = Encoder::receptive_interval(l, y);
                let (xlo, xhi) = Encoder::receptive_interval(l, x);
                let inside = (ylo..=yhi).contains(&(py as i64)) && (xlo..=xhi).contains(&(px as i64));
                assert!(inside || !differs, "level {l} cell ({y},{x}) changed outside its field");
                changed += usize::from(differs);
            }
        }
        assert!(changed > 0, "level {l} did not respond");
    }
}
