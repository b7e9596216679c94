use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::models::{Network, ParamRole};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of convolution weights.
pub const CONV_STD: f64 = 0.1;
/// Half-width of the uniform range for recurrent weights.
pub const RENET_RANGE: f64 = 0.2;

/// Draws fresh weights: conv weights from `N(0, CONV_STD^2)`, conv biases
/// zero, every recurrent tensor from `U[-RENET_RANGE, RENET_RANGE]` except
/// IRNN recurrent matrices (identity) and IRNN biases (zero). Batch-norm
/// scales start at one and shifts at zero.
///
/// Parameter `k` in construction order draws from stream `k` of `seed`, so
/// a tensor's values do not depend on the shapes of the others.
pub fn init_params<T: Scalar>(net: &mut Network<T>, seed: u64) -> Result<()> {
    init_params_with(net, seed, CONV_STD)
}

/// [`init_params`] with a different conv weight spread.
pub fn init_params_with<T: Scalar>(net: &mut Network<T>, seed: u64, conv_std: f64) -> Result<()> {
    let normal = Normal::new(0.0, conv_std).map_err(|e| Error::config(e.to_string()))?;
    let infos = net.params().to_vec();
    for (k, p) in infos.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let n: usize = p.shape.iter().product();
        let data: Vec<T> = match p.role {
            ParamRole::ConvWeight => (0..n).map(|_| T::of(normal.sample(&mut rng))).collect(),
            ParamRole::ConvBias | ParamRole::NormShift | ParamRole::IrnnBias => vec![T::zero(); n],
            ParamRole::NormScale => vec![T::one(); n],
            ParamRole::Recurrent => (0..n)
                .map(|_| T::of(rng.random_range(-RENET_RANGE..=RENET_RANGE)))
                .collect(),
            ParamRole::IrnnRecurrent => {
                let d = p.shape[0];
                (0..n).map(|i| if i / d == i % d { T::one() } else { T::zero() }).collect()
            }
        };
        net.set_param(&p.name, Tensor::from_vec(&p.shape, data)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{NormConfig, NormMode};
    use crate::models::{build_hrenet, ModelConfig, Arch, DESK_SCALE};
    use crate::renet::CellKind;

    #[test]
    fn supports_and_identity() {
        let mut cfg = ModelConfig::new(Arch::HReNet, DESK_SCALE, 3);
        cfg.cell = CellKind::Irnn;
        let mut net = Network::<f64>::new(cfg.build().unwrap()).unwrap();
        init_params(&mut net, 1).unwrap();
        for p in net.params().to_vec() {
            let v = net.param(&p.name).unwrap();
            match p.role {
                ParamRole::IrnnRecurrent => {
                    let d = p.shape[0];
                    for (i, &x) in v.data().iter().enumerate() {
                        assert_eq!(x, if i / d == i % d { 1.0 } else { 0.0 });
                    }
                }
                ParamRole::Recurrent => assert!(v.data().iter().all(|x| x.abs() <= 0.2)),
                ParamRole::ConvBias | ParamRole::IrnnBias => assert!(v.data().iter().all(|&x| x == 0.0)),
                _ => {}
            }
        }
    }

    #[test]
    fn seeded() {
        let spec = build_hrenet(DESK_SCALE, 2, false, NormConfig::new(NormMode::None)).unwrap();
        let mut a = Network::<f32>::new(spec.clone()).unwrap();
        let mut b = Network::<f32>::new(spec).unwrap();
        init_params(&mut a, 9).unwrap();
        init_params(&mut b, 9).unwrap();
        assert_eq!(a.param("conv3_2.W").unwrap(), b.param("conv3_2.W").unwrap());
        init_params(&mut b, 10).unwrap();
        assert_ne!(a.param("conv3_2.W").unwrap(), b.param("conv3_2.W").unwrap());
    }
}
