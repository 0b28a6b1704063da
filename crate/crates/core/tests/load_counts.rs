mod common;

use proptest::prelude::*;
use unroll_tuner::featurize::{data_loaded_per_level, extract_features};
use unroll_tuner::ScheduledProgram;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn per_level_loads_match_enumeration(seed in 0u64..1000, index in 0u64..1000) {
        let p = common::small_program(seed, index, 6);
        let sp = ScheduledProgram::new(p.clone());
        let expected = common::distinct_loads_per_level(&p);
        prop_assert_eq!(data_loaded_per_level(&sp), expected);
        prop_assert_eq!(extract_features(&sp).unwrap().data_loaded, expected);
    }
}
