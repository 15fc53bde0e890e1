//! Trains the toy network on the direction task, checkpoints halfway,
//! resumes, and evaluates with and without frame order.

use squeezetime::checkpoint::Checkpoint;
use squeezetime::data::generate_dataset;
use squeezetime::eval::evaluate_multiview;
use squeezetime::train::Trainer;
use squeezetime::RunConfig;

fn main() -> squeezetime::Result<()> {
    let mut run = RunConfig::toy();
    if let Some(epochs) = std::env::args().nth(1) {
        run.set("train.epochs", &epochs)?;
    }
    let train_set = generate_dataset(&run.data.train_spec())?;
    let test_set = generate_dataset(&run.data.test_spec())?;

    let mut trainer = Trainer::new(run.clone())?;
    let half = run.train.epochs / 2;
    trainer.train_until(&train_set, half)?;
    let path = std::env::temp_dir().join("squeezetime_toy.sqzt");
    trainer.checkpoint().save(&path)?;

    let mut trainer = Trainer::from_checkpoint(Checkpoint::load(&path)?)?;
    trainer.train_until(&train_set, run.train.epochs)?;
    for s in &trainer.history {
        println!("epoch {:>2}  lr {:.4}  loss {:.4}  train top1 {:.3}", s.epoch, s.lr, s.loss, s.top1);
    }

    let model = trainer.into_model();
    let views = run.data.views(run.model.frames, run.model.input_resolution);
    let ordered = evaluate_multiview(&model, &test_set, &views, None)?;
    let shuffled = evaluate_multiview(&model, &test_set, &views, Some(1))?;
    println!("test top1 {:.3}, with shuffled frames {:.3}", ordered.top1, shuffled.top1);
    println!("per class {:?}", ordered.per_class);
    Ok(())
}
