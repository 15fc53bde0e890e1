//! Straight-line network reference composed from the f64 oracles. Reads
//! parameters by name and follows the documented layout directly.

#![allow(dead_code)]

use squeezetime::model::{ModelConfig, ParamStore, Variant};

use super::oracle::{self, T};

pub struct Reference<'a> {
    pub store: &'a ParamStore<f64>,
    pub train: bool,
}

impl<'a> Reference<'a> {
    pub fn new(store: &'a ParamStore<f64>, train: bool) -> Self {
        Self { store, train }
    }

    pub fn p(&self, name: &str) -> &T {
        self.store.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn has(&self, name: &str) -> bool {
        self.store.get(name).is_some()
    }

    pub fn bn(&self, x: &T, name: &str) -> T {
        let (g, b) = (self.p(&format!("{name}.gamma")), self.p(&format!("{name}.beta")));
        let eps = self.store.bn_eps;
        if self.train {
            oracle::bn_train(x, g, b, eps)
        } else {
            let r = self.store.running().iter().find(|r| r.name == name).expect("running stats");
            oracle::bn_infer(x, g, b, &r.mean, &r.var, eps)
        }
    }

    pub fn conv(&self, x: &T, name: &str, stride: usize, pad: usize) -> T {
        oracle::conv2d(x, self.p(&format!("{name}.weight")), None, stride, pad)
    }

    pub fn tfc(&self, x: &T, name: &str, weights: &T, pad: usize) -> T {
        oracle::conv2d_scaled(x, self.p(&format!("{name}.weight")), None, Some(weights), 1, pad)
    }

    pub fn wcm(&self, x: &T, name: &str) -> T {
        let p = |s: &str| self.p(&format!("{name}.{s}"));
        oracle::wcm(x, p("fc1.weight"), p("fc1.bias"), p("fc2.weight"), p("fc2.bias"))
    }

    /// gate = sigmoid(conv3x3(relu(bn(conv7x7(relu(bn(tfc3x3(x))) + pos))))),
    /// value = bn(conv3x3(x)), output = gate * value.
    pub fn ioi(&self, x: &T, name: &str, weights: &T) -> T {
        let g = oracle::relu(&self.bn(&self.tfc(x, &format!("{name}.tfc"), weights, 1), &format!("{name}.tfc_bn")));
        let g = oracle::add_channel(&g, self.p(&format!("{name}.pos")));
        let g = oracle::relu(&self.bn(&self.conv(&g, &format!("{name}.relation"), 1, 3), &format!("{name}.relation_bn")));
        let gate = oracle::sigmoid(&self.conv(&g, &format!("{name}.gate"), 1, 1));
        let value = self.bn(&self.conv(x, &format!("{name}.value"), 1, 1), &format!("{name}.value_bn"));
        oracle::mul(&gate, &value)
    }

    pub fn branch1(&self, x: &T, name: &str, weights: &T) -> T {
        self.bn(&self.tfc(x, &format!("{name}.tfc"), weights, 0), &format!("{name}.tfc_bn"))
    }

    /// Sum of whichever branches exist under `name`.
    pub fn ctl_module(&self, x: &T, name: &str) -> T {
        let weights = self.wcm(x, &format!("{name}.wcm"));
        let b1 = self.has(&format!("{name}.tfc.weight")).then(|| self.branch1(x, name, &weights));
        let b2 = self
            .has(&format!("{name}.ioi.pos"))
            .then(|| self.ioi(x, &format!("{name}.ioi"), &weights));
        match (b1, b2) {
            (Some(a), Some(b)) => oracle::add(&a, &b),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => panic!("{name}: no branch"),
        }
    }

    pub fn block(&self, x: &T, name: &str, stride: usize) -> T {
        let h = oracle::relu(&self.bn(&self.conv(x, &format!("{name}.reduce"), stride, 0), &format!("{name}.reduce_bn")));
        let h = if self.has(&format!("{name}.mid.weight")) {
            self.bn(&self.conv(&h, &format!("{name}.mid"), 1, 1), &format!("{name}.mid_bn"))
        } else {
            self.ctl_module(&h, &format!("{name}.ctl"))
        };
        let h = oracle::relu(&h);
        let h = self.bn(&self.conv(&h, &format!("{name}.expand"), 1, 0), &format!("{name}.expand_bn"));
        let s = if self.has(&format!("{name}.shortcut.weight")) {
            self.bn(&self.conv(x, &format!("{name}.shortcut"), stride, 0), &format!("{name}.shortcut_bn"))
        } else {
            x.clone()
        };
        oracle::add(&h, &s)
    }

    /// Logits for `(n, 3, T, h, w)` clips.
    pub fn logits(&self, cfg: &ModelConfig, video: &T) -> T {
        let x = squeeze(video);
        let x = oracle::relu(&self.bn(&self.conv(&x, "stem.conv", 2, 2), "stem.bn"));
        let mut x = oracle::relu(&self.bn(&self.conv(&x, "down.conv", 2, 0), "down.bn"));
        for (i, &blocks) in cfg.stage_blocks.iter().enumerate() {
            for j in 0..blocks {
                let stride = if i > 0 && j == 0 { 2 } else { 1 };
                x = self.block(&x, &format!("stage{}.block{j}", i + 1), stride);
            }
        }
        let pooled = oracle::global_avg(&x);
        oracle::linear(&pooled, self.p("head.weight"), Some(self.p("head.bias")))
    }
}

/// `(n,3,T,h,w) -> (n,3T,h,w)` by explicit index mapping `color·T + t`.
pub fn squeeze(video: &T) -> T {
    let s = video.shape();
    let (n, tt, h, w) = (s[0], s[2], s[3], s[4]);
    let mut out = T::zeros(vec![n, 3 * tt, h, w]).unwrap();
    for b in 0..n {
        for col in 0..3 {
            for t in 0..tt {
                for y in 0..h {
                    for x in 0..w {
                        out.set(&[b, col * tt + t, y, x], video.get(&[b, col, t, y, x]));
                    }
                }
            }
        }
    }
    out
}

pub fn is_variant(cfg: &ModelConfig, v: Variant) -> bool {
    cfg.variant == v
}
