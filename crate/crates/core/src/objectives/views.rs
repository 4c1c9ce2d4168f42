use super::{itm_loss, mlm_loss, mrc_loss, mrfr_loss, p_mrtc_loss, LossBundle, ObjectiveError};
use crate::aligner::{MaskPlan, RegionTarget};
use crate::fusion::{FusedInput, FusionModel, HeadQuery};
use crate::numkernel::{Graph, Real, Tensor, Var};

/// One masked view of an example.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub input: FusedInput,
    pub plan: MaskPlan,
    /// Image-text match label, for views that train the match head.
    pub itm_label: Option<u8>,
}

/// Head positions and recovery targets derived from a mask plan.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlanTargets {
    pub query: HeadQuery,
    pub tokens: Vec<u32>,
    pub classes: Vec<u32>,
    pub features: Vec<Vec<f32>>,
    pub phrases: Vec<Vec<u32>>,
}

impl PlanTargets {
    pub fn new(input: &FusedInput, plan: &MaskPlan, itm: bool) -> Self {
        let mut t = PlanTargets::default();
        for m in &plan.text {
            t.query.mlm.push(input.word_position(m.position));
            t.tokens.push(m.target);
        }
        for r in &plan.regions {
            match &r.target {
                RegionTarget::ClassAndFeature { class_id, feature } => {
                    t.query.regions.push(r.region);
                    t.classes.push(*class_id);
                    t.features.push(feature.clone());
                }
                RegionTarget::PhraseTokens(tokens) => {
                    t.query.phrase_regions.push(r.region);
                    t.phrases.push(tokens.clone());
                }
            }
        }
        t.query.itm = itm;
        t
    }

    fn is_empty(&self) -> bool {
        self.query.mlm.is_empty()
            && self.query.regions.is_empty()
            && self.query.phrase_regions.is_empty()
            && !self.query.itm
    }
}

/// Scalar loss nodes of one example.
#[derive(Debug, Clone, Copy)]
pub struct ExampleLosses {
    pub mlm_rt: Var,
    pub mrc: Var,
    pub mrfr: Var,
    pub mlm_rp: Var,
    pub p_mrtc: Var,
    pub mlm_is: Var,
    pub itm: Var,
}

impl ExampleLosses {
    pub fn bundle<T: Real>(&self, g: &Graph<'_, T>) -> LossBundle {
        let v = |x: Var| g.scalar(x).as_f64();
        LossBundle {
            mlm_rt: v(self.mlm_rt),
            mrc: v(self.mrc),
            mrfr: v(self.mrfr),
            mlm_rp: v(self.mlm_rp),
            p_mrtc: v(self.p_mrtc),
            mlm_is: v(self.mlm_is),
            itm: v(self.itm),
        }
    }

    /// `scale · (L_RT + coefficient · (L_RP + L_IS))`. The coefficient is a
    /// plain number, so nothing upstream of it receives gradient.
    pub fn objective<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        coefficient: T,
        scale: T,
    ) -> Result<Var, ObjectiveError> {
        let rt = g.add_n(&[self.mlm_rt, self.mrc, self.mrfr])?;
        let rest = g.add_n(&[self.mlm_rp, self.p_mrtc, self.mlm_is, self.itm])?;
        let rest = g.scale(rest, coefficient);
        let total = g.add(rt, rest)?;
        Ok(g.scale(total, scale))
    }
}

struct ViewLosses {
    mlm: Var,
    classes: Var,
    features: Var,
    phrases: Var,
    itm: Var,
}

fn view_losses<T: Real>(
    g: &mut Graph<'_, T>,
    model: &FusionModel<T>,
    view: Option<&View>,
) -> Result<ViewLosses, ObjectiveError> {
    let zero = |g: &mut Graph<'_, T>| g.constant(Tensor::scalar(T::zero()));
    let targets = view.map(|v| PlanTargets::new(&v.input, &v.plan, v.itm_label.is_some()));
    let (view, targets) = match (view, targets) {
        (Some(v), Some(t)) if !t.is_empty() => (v, t),
        _ => {
            let z = zero(g);
            return Ok(ViewLosses {
                mlm: z,
                classes: z,
                features: z,
                phrases: z,
                itm: z,
            });
        }
    };
    let out = model.forward(g, &view.input, &targets.query)?;
    let itm = match (out.itm_score, view.itm_label) {
        (Some(s), Some(y)) => itm_loss(g, s, y)?,
        _ => zero(g),
    };
    Ok(ViewLosses {
        mlm: mlm_loss(g, out.mlm_logits, &targets.tokens)?,
        classes: mrc_loss(g, out.mrc_logits, &targets.classes)?,
        features: mrfr_loss(g, out.mrfr, &targets.features)?,
        phrases: p_mrtc_loss(g, out.phrase_logits, &targets.phrases)?,
        itm,
    })
}

/// The views of one example. The image-sentence granularity has two: a
/// masked sentence view for MLM and an uncorrupted view scored by the match
/// head, so that the match head never depends on corruption.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExampleViews<'a> {
    pub region_tag: Option<&'a View>,
    pub region_phrase: Option<&'a View>,
    pub image_sentence: Option<&'a View>,
    pub image_match: Option<&'a View>,
}

/// Builds the seven losses of one example. A missing or unmasked view
/// contributes zeros.
pub fn example_losses<T: Real>(
    g: &mut Graph<'_, T>,
    model: &FusionModel<T>,
    views: ExampleViews<'_>,
) -> Result<ExampleLosses, ObjectiveError> {
    let rt = view_losses(g, model, views.region_tag)?;
    let rn = view_losses(g, model, views.region_phrase)?;
    let is = view_losses(g, model, views.image_sentence)?;
    let matching = view_losses(g, model, views.image_match)?;
    Ok(ExampleLosses {
        mlm_rt: rt.mlm,
        mrc: rt.classes,
        mrfr: rt.features,
        mlm_rp: rn.mlm,
        p_mrtc: rn.phrases,
        mlm_is: is.mlm,
        itm: matching.itm,
    })
}
