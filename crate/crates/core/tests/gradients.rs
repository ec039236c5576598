use ls3d_core::conv::{Conv3d, Conv3dParams};
use ls3d_core::gradcheck::{gradcheck, gradcheck_with, random_ls3d_case, tiny_network_case, GradCheckConfig};
use ls3d_core::ls3d::{Ls3dConv, Ls3dLayer};
use ls3d_core::module::{Module, ParamMut};
use ls3d_core::{Result, Shape5, Tensor5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// LS3D layer with small random branch weights and offsets moved off the
/// integer grid.
fn ls3d_layer(ci: usize, co: usize, rng: &mut ChaCha8Rng) -> Ls3dConv<f64> {
    let mut layer = Ls3dLayer::new(ci, co, 3, rng).unwrap();
    layer.offset_branch.weight = Tensor5::uniform(layer.offset_branch.weight.shape(), 0.02, rng);
    layer.mask_branch.weight = Tensor5::uniform(layer.mask_branch.weight.shape(), 0.2, rng);
    layer
        .main
        .bias
        .iter_mut()
        .for_each(|b| *b = rng.random_range(-0.3..0.3));
    layer.shift_offsets(0.3);
    Ls3dConv::new(layer)
}

#[test]
fn plain_conv_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = Conv3dParams::zeros(2, 3, [3; 3], [1; 3], [1; 3]).unwrap();
    p.init_uniform(&mut rng);
    let mut layer = Conv3d::new(p);
    let x = Tensor5::uniform(Shape5::new(1, 2, 3, 6, 6).unwrap(), 1.0, &mut rng);
    let report = gradcheck(&mut layer, &x, 7).unwrap();
    assert!(report.max_error < 1e-6, "{report:?}");
}

#[test]
fn strided_and_transposed_conv_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = Conv3dParams::zeros(2, 2, [3; 3], [1, 2, 2], [1; 3]).unwrap();
    p.init_uniform(&mut rng);
    let x = Tensor5::uniform(Shape5::new(2, 2, 3, 6, 6).unwrap(), 1.0, &mut rng);
    assert!(gradcheck(&mut Conv3d::new(p), &x, 3).unwrap().max_error < 1e-6);

    let mut p = Conv3dParams::zeros_transposed(2, 3, [3; 3], [2, 2, 2], [1; 3], [0, 1, 1]).unwrap();
    p.init_uniform(&mut rng);
    assert!(gradcheck(&mut Conv3d::new(p), &x, 4).unwrap().max_error < 1e-6);
}

#[test]
fn ls3d_layer_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut layer = ls3d_layer(2, 2, &mut rng);
    let x = Tensor5::uniform(Shape5::new(1, 2, 3, 6, 6).unwrap(), 1.0, &mut rng);
    let report = gradcheck(&mut layer, &x, 5).unwrap();
    assert!(report.max_error < 1e-4, "{report:?}");
    assert_eq!(report.groups.len(), 7);
}

struct Corrupted<M>(M, f64);

impl<M: Module<f64>> Module<f64> for Corrupted<M> {
    fn forward(&mut self, x: &Tensor5<f64>, keep: bool) -> Result<Tensor5<f64>> {
        self.0.forward(x, keep)
    }

    fn backward(&mut self, g: &Tensor5<f64>) -> Result<Tensor5<f64>> {
        let gx = self.0.backward(g)?;
        let s = self.1;
        for p in self.0.params() {
            p.grad.iter_mut().for_each(|v| *v *= s);
        }
        Ok(gx.scale(s))
    }

    fn params(&mut self) -> Vec<ParamMut<'_, f64>> {
        self.0.params()
    }
}

#[test]
fn harness_detects_scaled_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut layer = Corrupted(ls3d_layer(2, 2, &mut rng), 1.01);
    let x = Tensor5::uniform(Shape5::new(1, 2, 3, 6, 6).unwrap(), 1.0, &mut rng);
    assert!(gradcheck(&mut layer, &x, 5).unwrap().max_error > 1e-3);
}

#[test]
fn harness_reports_non_finite() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut layer = ls3d_layer(1, 1, &mut rng);
    let mut x = Tensor5::uniform(Shape5::new(1, 1, 2, 4, 4).unwrap(), 1.0, &mut rng);
    x.data_mut()[3] = f64::INFINITY;
    let err = gradcheck(&mut layer, &x, 0).unwrap_err();
    assert!(err.to_string().contains("non-finite"), "{err}");
}

#[test]
fn tiny_network_gradcheck() {
    let (mut net, x) = tiny_network_case(21).unwrap();
    let cfg = GradCheckConfig {
        max_entries: 8,
        seed: 23,
        ..GradCheckConfig::default()
    };
    let report = gradcheck_with(&mut net, &x, &cfg).unwrap();
    assert!(report.max_error < 1e-4, "{:?}", report.worst_group());
}

#[test]
fn random_ls3d_configurations_gradcheck() {
    for seed in 0..20 {
        let (mut layer, x) = random_ls3d_case(seed).unwrap();
        let report = gradcheck(&mut layer, &x, seed).unwrap();
        assert!(report.max_error < 1e-4, "seed {seed}: {:?}", report.worst_group());
    }
}
