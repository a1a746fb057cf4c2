use serde::{Deserialize, Serialize};

use super::kernels;
use super::network::{Gradients, QNetworkParams, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    /// Decay of the squared-gradient average.
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            learning_rate: 0.001,
            decay: 0.95,
            epsilon: 1e-6,
        }
    }
}

/// Running averages of squared gradients, one tensor per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsPropState {
    pub second_moments: Vec<Tensor>,
}

impl RmsPropState {
    pub fn new(params: &QNetworkParams) -> Self {
        RmsPropState {
            second_moments: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(format!("{}.sq_avg", t.name), t.shape.clone()))
                .collect(),
        }
    }

    pub fn check_matches(&self, params: &QNetworkParams) -> Result<()> {
        let ok = self.second_moments.len() == params.tensors().len()
            && self
                .second_moments
                .iter()
                .zip(params.tensors())
                .all(|(v, p)| v.shape == p.shape && v.values.len() == p.values.len());
        if !ok {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        Ok(())
    }
}

/// `v <- rho v + (1 - rho) g^2; w <- w - lr g / (sqrt(v) + eps)`, elementwise.
pub fn rmsprop_step(
    params: &mut QNetworkParams,
    grads: &Gradients,
    state: &mut RmsPropState,
    cfg: &RmsPropConfig,
) -> Result<()> {
    state.check_matches(params)?;
    if grads.tensors.len() != params.tensors().len() {
        return Err(Error::Shape("gradient layout does not match parameters".into()));
    }
    for g in &grads.tensors {
        if !kernels::all_finite(&g.values) {
            let v = g.values.iter().find(|v| !v.is_finite()).expect("non-finite value");
            return Err(Error::Numeric(format!("gradient of {} holds {v}", g.name)));
        }
    }
    let rho = cfg.decay;
    for ((w, g), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(&grads.tensors)
        .zip(&mut state.second_moments)
    {
        if w.values.len() != g.values.len() {
            return Err(Error::Shape(format!("gradient {} has the wrong size", g.name)));
        }
        kernels::rmsprop(
            &mut w.values,
            &g.values,
            &mut v.values,
            rho,
            cfg.learning_rate,
            cfg.epsilon,
        );
    }
    params.check_finite()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::network::{LayerSpec, NetworkArchitecture};
    use crate::flow::GridSpec;

    fn scalar_net(w: f64) -> QNetworkParams {
        let arch = NetworkArchitecture::new(
            GridSpec::new(2, 2).unwrap(),
            vec![LayerSpec::Flatten, LayerSpec::FullyConnected { units: 1 }],
            1,
        )
        .unwrap();
        let mut net = QNetworkParams::zeros(&arch).unwrap();
        net.tensors_mut()[0].values[0] = w;
        net
    }

    #[test]
    fn single_element_update() {
        let mut net = scalar_net(1.0);
        let mut state = RmsPropState::new(&net);
        let mut grads = net.zero_gradients();
        grads.tensors[0].values[0] = 1.0;
        rmsprop_step(&mut net, &grads, &mut state, &RmsPropConfig::default()).unwrap();
        assert!((state.second_moments[0].values[0] - 0.05).abs() < 1e-15);
        let expected = 1.0 - 0.001 / (0.05f64.sqrt() + 1e-6);
        assert_eq!(net.tensors()[0].values[0], expected);
        assert!((expected - 0.995528).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut net = scalar_net(0.7);
        let before = net.clone();
        let mut state = RmsPropState::new(&net);
        let grads = net.zero_gradients();
        rmsprop_step(&mut net, &grads, &mut state, &RmsPropConfig::default()).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut net = scalar_net(0.7);
        let before = net.clone();
        let mut state = RmsPropState::new(&net);
        let mut grads = net.zero_gradients();
        grads.tensors[1].values[0] = f64::INFINITY;
        assert!(matches!(
            rmsprop_step(&mut net, &grads, &mut state, &RmsPropConfig::default()),
            Err(Error::Numeric(_))
        ));
        assert_eq!(net, before);
    }
}
