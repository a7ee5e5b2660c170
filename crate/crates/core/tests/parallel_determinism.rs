use partseg::selftrain::{train_stage1, RunConfig};
use partseg::synth::{generate_corpus, CorpusSpec};
use partseg::{Parallelism, Split};

#[test]
fn rayon_and_sequential_train_identically() {
    let mut spec = CorpusSpec::reference();
    spec.samples.train = 4;
    spec.samples.valid = 2;
    spec.samples.test = 1;
    let seq = generate_corpus(&spec, Parallelism::Sequential).unwrap();
    let par = generate_corpus(&spec, Parallelism::Rayon).unwrap();
    assert_eq!(seq.datasets, par.datasets);

    let run = |p: Parallelism| {
        let mut c = RunConfig::reference(Vec::new());
        c.parallelism = p;
        c.stage1.max_epochs = 3;
        train_stage1(&c, 4, &seq.split(Split::Train), &seq.split(Split::Valid)).unwrap()
    };
    let (a, b) = (run(Parallelism::Sequential), run(Parallelism::Rayon));
    let bits = |m: &partseg::model::SegModel| m.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.last.model), bits(&b.last.model));
    assert_eq!(a.last.velocity.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.last.velocity.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.best_val_dice.to_bits(), b.best_val_dice.to_bits());
}
