//! The full network: encoders, synthesis module and implicit decoder.

use crate::autograd::{Graph, Var};
use crate::config::Config;
use crate::easm::{Brc, Ema, FeatureSequence};
use crate::encoders::Encoder;
use crate::error::{Error, Result};
use crate::events::{slice_segments, VoxelGrid};
use crate::frame::Frame;
use crate::livt::{hr_size, Embedded, Livt, QuerySpec};
use crate::nn::{InitScheme, ParamBuilder, ParamStore};
use crate::tensor::Tensor;

/// Query pixels decoded per graph at inference.
const INFER_CHUNK: usize = 2048;

/// LR endpoint frames and their voxel grids at LR resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub lr0: Frame,
    pub lr1: Frame,
    pub voxel_fwd: VoxelGrid,
    pub voxel_bwd: VoxelGrid,
}

impl ModelInput {
    pub fn new(lr0: Frame, lr1: Frame, voxel_fwd: VoxelGrid) -> Self {
        let voxel_bwd = voxel_fwd.reversed();
        Self { lr0, lr1, voxel_fwd, voxel_bwd }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.lr0.height(), self.lr0.width())
    }

    fn check(&self, m: usize) -> Result<()> {
        let (h, w) = self.size();
        if (self.lr1.height(), self.lr1.width()) != (h, w) {
            return Err(Error::Shape(format!("endpoint frames differ in size: {h}x{w} vs {}x{}", self.lr1.height(), self.lr1.width())));
        }
        for v in [&self.voxel_fwd, &self.voxel_bwd] {
            if (v.height(), v.width()) != (h, w) {
                return Err(Error::Shape(format!("voxel grid {}x{} does not match frames {h}x{w}", v.height(), v.width())));
            }
            if v.segments() != m {
                return Err(Error::Shape(format!("voxel grid has {} segments, model expects M = {m}", v.segments())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EvEnhancer {
    pub cfg: Config,
    pub frame_enc: Encoder,
    pub event_enc: Encoder,
    pub ema: Ema,
    pub brc: Brc,
    pub livt: Livt,
}

impl EvEnhancer {
    /// Register every parameter in `store`. Branches switched off by a toggle
    /// are still built so checkpoints keep one layout across ablations; the
    /// pyramid depth does change the layout.
    pub fn new(store: &mut ParamStore, cfg: &Config, scheme: InitScheme) -> Result<Self> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new(store, cfg.seed, scheme);
        let c = cfg.model.channels;
        let frame_enc = Encoder::frame(&mut pb, "frame_enc", c, cfg.model.res_blocks);
        let event_enc = Encoder::event(&mut pb, "event_enc", c, cfg.model.res_blocks);
        let ema = Ema::new(&mut pb, c, cfg.ema.direction, cfg.ema.levels);
        let brc = Brc::new(&mut pb, c, cfg.brc.enabled, cfg.brc.direction, cfg.brc.attention.enabled);
        let livt = Livt::new(&mut pb, c, &cfg.livt);
        Ok(Self { cfg: cfg.clone(), frame_enc, event_enc, ema, brc, livt })
    }

    /// The temporally dense feature sequence at `M + 2` uniform timestamps.
    pub fn synthesize<'g>(&self, g: &'g Graph<'g>, input: &ModelInput) -> Result<FeatureSequence<'g>> {
        input.check(self.cfg.model.segments)?;
        let f0 = self.frame_enc.forward(g, g.constant(input.lr0.to_chw()))?;
        let f1 = self.frame_enc.forward(g, g.constant(input.lr1.to_chw()))?;
        let encode = |v: &VoxelGrid| -> Result<Vec<Var<'g>>> {
            slice_segments(v).segments.into_iter().map(|s| self.event_enc.forward(g, g.constant(s))).collect()
        };
        let ev_fwd = encode(&input.voxel_fwd)?;
        let ev_bwd = encode(&input.voxel_bwd)?;
        let seq = self.ema.forward(g, f0, f1, &ev_fwd, &ev_bwd)?;
        let ev_feats = self.brc.event_features(g, &ev_fwd)?;
        self.brc.forward(g, &seq, &ev_feats)
    }

    pub fn embed<'g>(&self, g: &'g Graph<'g>, input: &ModelInput) -> Result<Embedded<'g>> {
        let seq = self.synthesize(g, input)?;
        self.livt.embed(g, &seq)
    }

    /// Decode `pixels` of the frame at `target`; `N x 3`.
    pub fn decode<'g>(&self, e: &Embedded<'g>, target: f64, s: f64, cell_t: f64, pixels: &[(usize, usize)]) -> Result<Var<'g>> {
        self.livt.decode(e, target, s, cell_t, pixels)
    }

    /// Frames at `query`, `ceil(h s) x ceil(w s)` each.
    pub fn infer(&self, store: &ParamStore, input: &ModelInput, query: &QuerySpec) -> Result<Vec<Frame>> {
        let (h, w) = input.size();
        self.infer_sized(store, input, query, hr_size(h, query.s), hr_size(w, query.s))
    }

    /// As [`infer`](Self::infer) on an explicit `out_h x out_w` pixel grid.
    pub fn infer_sized(&self, store: &ParamStore, input: &ModelInput, query: &QuerySpec, out_h: usize, out_w: usize) -> Result<Vec<Frame>> {
        query.validate()?;
        let (k, q, v, t, h, w) = {
            let g = Graph::inference(store);
            let e = self.embed(&g, input)?;
            let (k, q, v) = ((*e.k.value()).clone(), (*e.q.value()).clone(), (*e.v.value()).clone());
            (k, q, v, e.t, e.h, e.w)
        };
        let pixels: Vec<(usize, usize)> = (0..out_h).flat_map(|y| (0..out_w).map(move |x| (y, x))).collect();
        let mut frames = Vec::with_capacity(query.times.len());
        for &tau in &query.times {
            let mut rgb = Vec::with_capacity(pixels.len() * 3);
            for chunk in pixels.chunks(INFER_CHUNK) {
                let g = Graph::inference(store);
                let e = Embedded::from_values(&g, k.clone(), q.clone(), v.clone(), t, h, w);
                rgb.extend_from_slice(self.decode(&e, tau, query.s, query.cell_t, chunk)?.value().data());
            }
            let chw = Tensor::new(&[pixels.len(), 3], rgb)?;
            let planes: [Vec<f64>; 3] = std::array::from_fn(|c| chw.data().iter().skip(c).step_by(3).copied().collect());
            frames.push(Frame::from_planes(out_h, out_w, &planes));
        }
        Ok(frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::check_params;
    use crate::events::voxelize;
    use crate::events::{EventRecord, EventStream};
    use rand::{Rng, SeedableRng};

    pub(crate) fn random_input(h: usize, w: usize, m: usize, seed: u64) -> ModelInput {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut frame = || Frame::from_fn(h, w, |_, _| [r.gen(), r.gen(), r.gen()]);
        let (a, b) = (frame(), frame());
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 1);
        let ev = (0..4 * h * w)
            .map(|_| EventRecord::new(r.gen(), r.gen_range(0..w as u32), r.gen_range(0..h as u32), if r.gen() { 1 } else { -1 }))
            .collect();
        let vox = voxelize(&EventStream::new(ev).unwrap(), h, w, m).unwrap();
        ModelInput::new(a, b, vox)
    }

    fn tiny() -> Config {
        let mut c = Config::toy();
        c.model.channels = 4;
        c.model.res_blocks = 1;
        c.livt.channels = 4;
        c.livt.frequencies = 2;
        c.livt.mlp_hidden = vec![8, 8];
        c
    }

    #[test]
    fn sequence_length_and_rendered_shapes() {
        let cfg = tiny();
        let mut store = ParamStore::new();
        let model = EvEnhancer::new(&mut store, &cfg, InitScheme::Standard).unwrap();
        let input = random_input(6, 5, 3, 1);
        {
            let g = Graph::inference(&store);
            assert_eq!(model.synthesize(&g, &input).unwrap().len(), 5);
        }
        let frames = model.infer(&store, &input, &QuerySpec::uniform(1.5, 2).unwrap()).unwrap();
        assert_eq!(frames.len(), 3);
        assert!(frames.iter().all(|f| f.height() == 9 && f.width() == 8));
    }

    #[test]
    fn chunked_inference_equals_one_graph() {
        let cfg = tiny();
        let mut store = ParamStore::new();
        let model = EvEnhancer::new(&mut store, &cfg, InitScheme::Dense).unwrap();
        let input = random_input(12, 16, 3, 2);
        let q = QuerySpec::uniform(4.0, 1).unwrap();
        let frames = model.infer(&store, &input, &q).unwrap();
        let g = Graph::inference(&store);
        let e = model.embed(&g, &input).unwrap();
        let whole = model.livt.render_frame(&e, 1.0, 4.0, q.cell_t).unwrap();
        assert_eq!(frames[1].to_chw(), *whole.value());
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let cfg = tiny();
        let mut store = ParamStore::new();
        let model = EvEnhancer::new(&mut store, &cfg, InitScheme::Standard).unwrap();
        let mut input = random_input(6, 6, 5, 3);
        let q = QuerySpec::uniform(1.0, 1).unwrap();
        assert!(matches!(model.infer(&store, &input, &q), Err(Error::Shape(_))));
        input.lr1 = Frame::filled(5, 6, [0.0; 3]);
        assert!(model.infer(&store, &input, &q).is_err());
    }

    #[test]
    fn sampled_parameter_gradients_match() {
        let mut cfg = tiny();
        cfg.livt.local_grid = [3, 3, 3];
        let mut store = ParamStore::new();
        let model = EvEnhancer::new(&mut store, &cfg, InitScheme::Dense).unwrap();
        let input = random_input(4, 4, 3, 4);
        let ids: Vec<_> = store.ids().collect();
        let picks: Vec<_> = ids.iter().step_by(7).map(|&id| (id, store.get(id).len() / 2)).collect();
        let model = &model;
        let input = &input;
        let check = check_params(&mut store, &picks, 1e-5, 1e-4, |g| {
            let e = model.embed(g, input)?;
            Ok(model.decode(&e, 0.4, 2.0, 0.5, &[(0, 0), (3, 5), (7, 7)])?.square().sum())
        })
        .unwrap();
        assert_eq!(check.passed, check.checked, "{check:?}");
    }
}
