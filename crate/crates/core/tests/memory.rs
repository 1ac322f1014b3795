mod common;

use common::run_dcm;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn randomized_updates_keep_balance_and_match_the_oracle() {
    let run = run_dcm(&mut ChaCha8Rng::seed_from_u64(11), 2000);
    assert_eq!(run.updates, 2000);
    assert_eq!(run.balance_violations, 0);
    assert_eq!(run.oracle_mismatches, 0);
    assert_eq!(run.static_changes, 0);
}
