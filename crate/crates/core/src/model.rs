//! The full network: backbone, per-stage attention, proposal blocks with
//! weighted fusion, and the refinement module.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{DsaBlock, DsaVars};
use crate::autograd::{Tape, Var};
use crate::backbone::{Backbone, StageVars};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::refine::{FeatureFrame, FusedVars, RefineModule};
use crate::rpn::{fuse_stages, AnchorSet, RpnBlock, RpnVars, FUSION_CLS, FUSION_REG};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: RunConfig,
    pub backbone: Backbone,
    pub dsa: [DsaBlock; 3],
    pub rpn: [RpnBlock; 3],
    pub refine: RefineModule,
    pub anchors: AnchorSet,
    /// Side of the response map.
    pub response: usize,
}

/// Everything computed for one exemplar/search pair.
#[derive(Clone, Copy, Debug)]
pub struct PairVars<'t> {
    pub attn: [DsaVars<'t>; 3],
    pub stage_rpn: [RpnVars<'t>; 3],
    pub rpn: RpnVars<'t>,
    /// Present when refinement is enabled.
    pub fused: Option<FusedVars<'t>>,
}

pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("backbone.")
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(&cfg.backbone)?;
        backbone.check_crop(&[3, cfg.data.exemplar_size, cfg.data.exemplar_size])?;
        backbone.check_crop(&[3, cfg.data.search_size, cfg.data.search_size])?;
        let fz = backbone.stage_sides(cfg.data.exemplar_size).expect("checked crop")[2];
        let fx = backbone.stage_sides(cfg.data.search_size).expect("checked crop")[2];
        let t = cfg.rpn.template_crop;
        if t > fz || t > fx {
            return Err(Error::Config(format!("template_crop {t} exceeds feature sides {fz}/{fx}")));
        }
        let response = fx - t + 1;
        let c = cfg.backbone.adjusted_channels;
        let k = cfg.rpn.anchor_ratios.len();
        let dsa = [
            DsaBlock::new("dsa3", c, &cfg.attention)?,
            DsaBlock::new("dsa4", c, &cfg.attention)?,
            DsaBlock::new("dsa5", c, &cfg.attention)?,
        ];
        let rpn = [3, 4, 5].map(|s| RpnBlock::new(format!("rpn{s}"), c, k, t));
        let anchors = AnchorSet::new(&cfg.rpn, response, cfg.backbone.final_stride);
        let frame = FeatureFrame {
            origin: anchors.origin,
            stride: cfg.backbone.final_stride as f64,
        };
        let ch = &cfg.backbone.channels_per_stage;
        let refine = RefineModule::new(&cfg.refinement, cfg.attention.deform_pool, c, [ch[0], ch[1]], response, frame, t);
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            dsa,
            rpn,
            refine,
            anchors,
            response,
        })
    }

    pub fn refinement_enabled(&self) -> bool {
        self.cfg.refinement.enabled
    }

    /// Fresh parameters. Every module draws from its own seeded stream so a
    /// toggle never changes the initialization of the others.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let rng = |salt: u64| ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.backbone.init(&mut store, &mut rng(1));
        for (i, d) in self.dsa.iter().enumerate() {
            d.init(&mut store, &mut rng(10 + i as u64));
        }
        for (i, r) in self.rpn.iter().enumerate() {
            r.init(&mut store, &mut rng(20 + i as u64));
        }
        store.insert(FUSION_CLS, Tensor::zeros(&[1, 3]));
        store.insert(FUSION_REG, Tensor::zeros(&[1, 3]));
        self.refine.init(&mut store, &mut rng(30));
        store
    }

    pub fn features<'t>(&self, tape: &'t Tape, store: &ParamStore, crop: Var<'t>) -> StageVars<'t> {
        self.backbone.forward(tape, store, crop)
    }

    /// Attention, proposals and (optionally) fused refinement features.
    pub fn pair<'t>(&self, tape: &'t Tape, store: &ParamStore, z: &StageVars<'t>, x: &StageVars<'t>) -> PairVars<'t> {
        let (zd, xd) = (z.deep(), x.deep());
        let attn: [DsaVars<'t>; 3] = std::array::from_fn(|s| self.dsa[s].forward(tape, store, zd[s], xd[s]));
        let stage_rpn: [RpnVars<'t>; 3] = std::array::from_fn(|s| self.rpn[s].forward(tape, store, attn[s].z, attn[s].x));
        let rpn = fuse_stages(&stage_rpn, tape.param(store, FUSION_CLS), tape.param(store, FUSION_REG));
        let fused = self.refinement_enabled().then(|| {
            self.refine.fused(
                tape,
                store,
                attn.map(|a| a.z),
                attn.map(|a| a.x),
                [x.stages[0], x.stages[1]],
            )
        });
        PairVars {
            attn,
            stage_rpn,
            rpn,
            fused,
        }
    }

    /// Names of parameters the current toggles actually use.
    pub fn active_params(&self, store: &ParamStore) -> Vec<String> {
        let tape = Tape::new();
        let s = self.cfg.data.search_size;
        let e = self.cfg.data.exemplar_size;
        let z = self.features(&tape, store, tape.constant(Tensor::zeros(&[3, e, e])));
        let x = self.features(&tape, store, tape.constant(Tensor::zeros(&[3, s, s])));
        let p = self.pair(&tape, store, &z, &x);
        let mut root = p.rpn.cls.sum().add(p.rpn.reg.sum());
        if let Some(f) = &p.fused {
            let r = self.anchors.boxes[0];
            root = root
                .add(self.refine.refine_box(&tape, store, f, &r).sum())
                .add(self.refine.refine_mask(&tape, store, f, &r).sum());
        }
        tape.backward(root).into_param_grads().into_keys().collect()
    }
}
