//! Visual-expert attention: copied experts reproduce the text-only baseline,
//! trained experts diverge from it, and text-only inputs never reach them.

use mmvl::autograd::Graph;
use mmvl::data::{generate_sample, SampleKind};
use mmvl::fpid::PositionMode;
use mmvl::image::ImageDims;
use mmvl::merger::MergeSpec;
use mmvl::model::{Model, ModelConfig, PromptPart};
use mmvl::params::Group;
use mmvl::vlm::Routing;

fn logits(model: &Model, prompt: &[PromptPart], routing: Routing) -> mmvl::Result<mmvl::tensor::Tensor> {
    let mut g = Graph::inference(&model.params);
    let f = model.forward_with(&mut g, prompt, MergeSpec::mean(2), PositionMode::SharedFpid, routing)?;
    Ok(g.value(f.logits).clone())
}

fn main() -> mmvl::Result<()> {
    let mut model = Model::new(ModelConfig::default(), 1)?;
    let prompt = generate_sample(3, SampleKind::ImageCaption, ImageDims::square(336)?).prompt(false);

    let a = logits(&model, &prompt, Routing::VisualExperts)?;
    let b = logits(&model, &prompt, Routing::TextOnly)?;
    println!("experts = copy of text QKV: max |logit diff| {:.2e}", a.max_abs_diff(&b));

    for id in model.params.ids_in_group(Group::VisualExperts) {
        model.params.value_mut(id).data_mut().iter_mut().for_each(|v| *v *= 1.5);
    }
    let c = logits(&model, &prompt, Routing::VisualExperts)?;
    println!("experts rescaled:           max |logit diff| {:.2e}", c.max_abs_diff(&b));

    let text = vec![PromptPart::Text(vec![1, 6, 7, 8, 20, 30, 3, 2])];
    let mut g = Graph::new(&model.params);
    let (loss, _) = model.loss(&mut g, &text, MergeSpec::mean(2), PositionMode::SharedFpid)?;
    let grads = g.backward(loss);
    let touched = model.params.ids_in_group(Group::VisualExperts).into_iter().filter(|&id| grads.get(id).is_some()).count();
    println!("text-only loss {:.4}: expert tensors with a gradient: {touched}", g.value(loss).get(0, 0));
    Ok(())
}
