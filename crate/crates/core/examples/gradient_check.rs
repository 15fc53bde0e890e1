//! Checks the hand-written backward passes of a small network against
//! finite differences along random directions.

use squeezetime::gradcheck::model_gradcheck;
use squeezetime::model::{ModelConfig, Variant};
use squeezetime::ops::Mode;

fn main() -> squeezetime::Result<()> {
    for variant in Variant::ALL {
        let cfg = ModelConfig {
            variant,
            ..ModelConfig::toy()
        };
        let r = model_gradcheck(&cfg, 1, 2, Mode::Infer, 2)?;
        println!(
            "{variant:<5} max rel error {:.2e} over {} directions",
            r.max_rel_error, r.checked
        );
    }
    Ok(())
}
