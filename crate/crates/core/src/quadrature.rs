//! Fixed-node quadrature rules on `[-1, 1]`.

use serde::{Deserialize, Serialize};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_838_258_730,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self::gauss_kronrod15()
    }
}

impl QuadratureRule {
    /// The 15-point Kronrod extension of 7-point Gauss–Legendre, nodes in
    /// ascending order.
    pub fn gauss_kronrod15() -> Self {
        let mut nodes = Vec::with_capacity(15);
        let mut weights = Vec::with_capacity(15);
        for k in 0..7 {
            nodes.push(-XGK[k]);
            weights.push(WGK[k]);
        }
        for k in (0..8).rev() {
            nodes.push(XGK[k]);
            weights.push(WGK[k]);
        }
        QuadratureRule { nodes, weights }
    }

    /// `panels` equal sub-intervals of `[-1, 1]`, each carrying a copy of
    /// this rule.
    pub fn composite(&self, panels: usize) -> Self {
        let panels = panels.max(1);
        let h = 2.0 / panels as f64;
        let mut nodes = Vec::with_capacity(self.count() * panels);
        let mut weights = Vec::with_capacity(self.count() * panels);
        for p in 0..panels {
            let lo = -1.0 + h * p as f64;
            for (x, w) in self.nodes.iter().zip(&self.weights) {
                nodes.push(lo + 0.5 * h * (x + 1.0));
                weights.push(0.5 * h * w);
            }
        }
        QuadratureRule { nodes, weights }
    }

    /// Twice the node count: the rule applied on both halves of the interval.
    pub fn doubled(&self) -> Self {
        self.composite(2)
    }

    pub fn count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Nodes and weights mapped to `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
        let half = 0.5 * (b - a);
        let nodes = self.nodes.iter().map(|x| a + half * (x + 1.0)).collect();
        let weights = self.weights.iter().map(|w| half * w).collect();
        (nodes, weights)
    }

    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let (nodes, weights) = self.mapped(a, b);
        nodes.iter().zip(&weights).map(|(&t, w)| w * f(t)).sum()
    }
}
