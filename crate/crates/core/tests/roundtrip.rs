mod common;

use common::{random_case, sorted};
use pedalcw::midi_io::{parse_midi, write_midi};
use pedalcw::pipeline::{decode_to_midi, encode_midi};
use pedalcw::tokenizer::{decode, encode, parse_tokens, serialize, TokenFormat};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tokens_survive_text_and_integer_forms(seed in any::<u64>()) {
        let case = random_case(&mut ChaCha8Rng::seed_from_u64(seed));
        let tokens = encode(&case.score, &case.pedal, &case.chords, &case.tempi).unwrap();
        for format in [TokenFormat::Text, TokenFormat::Integer] {
            let back = decode(&parse_tokens(&serialize(&tokens, format)).unwrap()).unwrap();
            prop_assert_eq!(sorted(&back.score.notes), sorted(&case.score.notes));
            prop_assert_eq!(&back.pedal, &case.pedal);
            prop_assert_eq!(&back.chords, &case.chords);
            prop_assert_eq!(&back.tempi, &case.tempi);
        }
    }

    #[test]
    fn midi_write_then_parse_is_identity(seed in any::<u64>()) {
        let case = random_case(&mut ChaCha8Rng::seed_from_u64(seed));
        let score = parse_midi(&write_midi(&case.score, &case.pedal_intervals())).unwrap();
        prop_assert_eq!(score.notes, sorted(&case.score.notes));
        prop_assert_eq!(score.tempo_events, sorted(&case.score.tempo_events));
        prop_assert_eq!(score.raw_pedal, case.pedal_events());
    }

    #[test]
    fn pipeline_reaches_a_fixpoint(seed in any::<u64>()) {
        let case = random_case(&mut ChaCha8Rng::seed_from_u64(seed));
        let first = encode_midi(&write_midi(&case.score, &case.pedal_intervals())).unwrap();
        let second = encode_midi(&decode_to_midi(&first).unwrap()).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn token_parser_never_panics(text in "\\PC{0,200}") {
        let _ = parse_tokens(&text);
    }

    #[test]
    fn midi_parser_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let mut file = b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\x01\xe0MTrk".to_vec();
        file.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
        file.extend_from_slice(&bytes);
        let _ = parse_midi(&file);
        let _ = parse_midi(&bytes);
    }
}
