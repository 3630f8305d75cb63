use std::fmt;
use std::sync::Arc;

use rand::RngCore;

use super::ModelFamily;

type LogLik = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;
type Drawer = dyn Fn(&[f64], usize, &mut dyn RngCore) -> Vec<f64> + Send + Sync;

/// A user-supplied family. Derivatives come from finite differences.
#[derive(Clone)]
pub struct CustomFamily {
    key: String,
    names: Vec<&'static str>,
    positive: Vec<bool>,
    loglik: Arc<LogLik>,
    drawer: Arc<Drawer>,
}

impl CustomFamily {
    pub fn new(
        key: impl Into<String>,
        names: Vec<&'static str>,
        positive: Vec<bool>,
        loglik: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        drawer: impl Fn(&[f64], usize, &mut dyn RngCore) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        assert_eq!(names.len(), positive.len());
        CustomFamily {
            key: key.into(),
            names,
            positive,
            loglik: Arc::new(loglik),
            drawer: Arc::new(drawer),
        }
    }
}

impl fmt::Debug for CustomFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomFamily").field("key", &self.key).finish()
    }
}

impl ModelFamily for CustomFamily {
    fn key(&self) -> String {
        self.key.clone()
    }

    fn dim(&self) -> usize {
        self.names.len()
    }

    fn param_names(&self) -> Vec<&'static str> {
        self.names.clone()
    }

    fn in_domain(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta
                .iter()
                .zip(&self.positive)
                .all(|(t, &p)| t.is_finite() && (!p || *t > 0.0))
    }

    fn positive(&self) -> Vec<bool> {
        self.positive.clone()
    }

    fn loglik(&self, theta: &[f64], y: &[f64]) -> f64 {
        (self.loglik)(theta, y)
    }

    fn draw(&self, theta: &[f64], n: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        (self.drawer)(theta, n, rng)
    }

    fn starts(&self, y: &[f64]) -> Vec<Vec<f64>> {
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        vec![self
            .positive
            .iter()
            .enumerate()
            .map(|(i, &p)| if p { sd.max(1e-3) } else if i == 0 { mean } else { 0.0 })
            .collect()]
    }
}
