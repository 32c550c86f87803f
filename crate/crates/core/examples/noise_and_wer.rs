//! Corrupt clean utterances with the synthetic recognition-error channel,
//! then score them with WER and group them into buckets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use robust_slu::corpus::{toy_lexicon, wer, NoiseChannel, NoiseConfig, WerBuckets};

fn main() -> robust_slu::Result<()> {
    let channel = NoiseChannel::new(NoiseConfig::default(), toy_lexicon())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let clean = [
        "turn off the lights in the kitchen",
        "what is the weather like in london tomorrow",
        "set an alarm for seven in the morning",
        "play some jazz music",
        "order a pizza from the place around the corner",
        "remove the alarm for tomorrow",
    ];
    let buckets = WerBuckets::google();
    for c in clean {
        let asr = channel.apply(c, &mut rng);
        let w = wer(c, &asr)?;
        println!("{w:.2} {:<7} {c:?} -> {asr:?}", buckets.name_of(w));
    }
    Ok(())
}
