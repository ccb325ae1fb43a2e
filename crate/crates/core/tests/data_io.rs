use std::path::PathBuf;

use ndarray::Array2;
use vimco_core::data::{
    centering_stats, load_idx, reassemble, sop_view, write_amat, Binarization, DataSource, Idx,
};
use vimco_core::train::{TaskData, TaskMode};

fn digits() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist10k-images-idx3-ubyte.gz")
}

#[test]
fn bundled_digits_load_as_28_by_28_images() {
    let Idx::Images { rows, cols, pixels } = load_idx(digits()).unwrap() else {
        panic!("expected images");
    };
    assert_eq!((rows, cols, pixels.dim()), (28, 28, (10_000, 784)));
    assert!(pixels.iter().all(|p| (0.0..=1.0).contains(p)));
    let labels = digits().with_file_name("mnist10k-labels-idx1-ubyte.gz");
    assert!(matches!(load_idx(labels).unwrap(), Idx::Labels(l) if l.len() == 10_000));
}

#[test]
fn desk_scale_split_and_half_images() {
    let src = DataSource::Idx {
        path: digits(),
        binarization: Binarization::Stochastic { seed: 0 },
        sizes: [5000, 2500, 2500],
    };
    let ds = src.load().unwrap();
    assert_eq!(ds, src.load().unwrap());
    assert_eq!((ds.train.nrows(), ds.valid.nrows(), ds.test.nrows()), (5000, 2500, 2500));
    assert!(ds.train.iter().all(|&v| v == 0.0 || v == 1.0));

    let (ctx, obs) = sop_view(ds.test.view(), 28, 28).unwrap();
    assert_eq!((ctx.ncols(), obs.ncols()), (392, 392));
    assert_eq!(reassemble(ctx.view(), obs.view()).unwrap(), ds.test);

    let sop = TaskData::new(&ds, TaskMode::SopLearned).unwrap();
    assert_eq!(sop.valid.contexts.as_ref().unwrap().ncols(), 392);
    let m = centering_stats(ds.train.view()).unwrap();
    let centered = &ds.train - &m;
    assert!(centering_stats(centered.view()).unwrap().iter().all(|v| v.abs() < 1e-12));
    assert_ne!(m, centering_stats(ds.valid.view()).unwrap());

    let too_many = DataSource::Idx {
        path: digits(),
        binarization: Binarization::Threshold,
        sizes: [9000, 1000, 1000],
    };
    assert!(too_many.load().is_err());
}

#[test]
fn text_matrices_load_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let m = Array2::from_shape_fn((6, 16), |(i, j)| ((i + j) % 3 == 0) as u8 as f64);
    let paths: Vec<PathBuf> = ["a", "b", "c"].iter().map(|n| dir.path().join(n)).collect();
    for p in &paths {
        write_amat(p, m.view()).unwrap();
    }
    let src = DataSource::Amat {
        train: paths[0].clone(),
        valid: paths[1].clone(),
        test: paths[2].clone(),
        height: 4,
        width: 4,
    };
    assert_eq!(src.load().unwrap().test, m);
    let wrong = DataSource::Amat {
        train: paths[0].clone(),
        valid: paths[1].clone(),
        test: paths[2].clone(),
        height: 3,
        width: 4,
    };
    assert!(wrong.load().is_err());
}
