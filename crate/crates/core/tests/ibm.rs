use pfmcmc::ibm::{ibm_step, IbmFactory, IbmSettings, IbmState};
use pfmcmc::model::ModelFactory;
use pfmcmc::Parameters;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn truth() -> Parameters {
    Parameters::from_pairs([("k_prey", 25.0), ("k_pred", 15.0)]).unwrap()
}

#[test]
fn full_scale_initialization_lands_near_target() {
    let s = IbmSettings::full_scale();
    let params = s.parameters();
    let (mut prey, mut predators) = (0.0, 0.0);
    let seeds = 4;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = IbmState::initial(s.initial_prey, s.initial_predators, &s.rates);
        for _ in 0..s.init_steps {
            ibm_step(&mut st, &params, &mut rng);
        }
        let c = st.census(s.rates.detection_mass);
        prey += c.prey() as f64 / seeds as f64;
        predators += c.predators() as f64 / seeds as f64;
    }
    assert!((1700.0..=2300.0).contains(&prey), "prey {prey}");
    assert!((20.0..=40.0).contains(&predators), "predators {predators}");
}

#[test]
fn desk_population_persists() {
    let s = IbmSettings::desk();
    let params = s.parameters();
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = IbmState::initial(s.initial_prey, s.initial_predators, &s.rates);
        for _ in 0..200 {
            ibm_step(&mut st, &params, &mut rng);
        }
        let c = st.census(s.rates.detection_mass);
        assert!((40..=160).contains(&c.prey()), "seed {seed}: prey {}", c.prey());
        assert!(c.predators() > 0, "seed {seed}: predators died out");
    }
}

#[test]
fn full_scale_synthesis_schedule() {
    let factory = IbmFactory::new(IbmSettings::full_scale()).unwrap();
    let obs = factory.synthesize(&truth(), 1).unwrap();
    assert_eq!(obs.len(), 20);
    assert_eq!(obs.times()[0], 1901);
    assert_eq!(*obs.times().last().unwrap(), 2604);
    assert_eq!(obs.fields(), ["prey", "predators"]);
}

#[test]
fn synthesis_is_deterministic_and_seed_sensitive() {
    let factory = IbmFactory::new(IbmSettings::desk()).unwrap();
    let write = |seed| {
        let mut out = Vec::new();
        factory.synthesize(&truth(), seed).unwrap().write_csv(&mut out).unwrap();
        out
    };
    assert_eq!(write(3), write(3));
    assert_ne!(write(3), write(4));
    let text = String::from_utf8(write(3)).unwrap();
    assert_eq!(text.lines().count(), 11);
    assert!(text.starts_with("time,prey,predators\n"));
}
