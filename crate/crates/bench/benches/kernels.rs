use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use xlcolbert::{build_index, greedy_align, maxsim_score, DocumentRecord, EncoderParams};

const VOCAB: usize = 400;

fn tokens(len: usize, salt: u32) -> Vec<u32> {
    (0..len as u32).map(|i| (i * 37 + salt * 11) % VOCAB as u32).collect()
}

fn bench_maxsim(c: &mut Criterion) {
    let params = EncoderParams::random(VOCAB, 64, 128, 1).unwrap();
    let q = params.encode(&tokens(32, 1)).unwrap();
    let d = params.encode(&tokens(180, 2)).unwrap();
    c.bench_function("maxsim 32x180 D=128", |b| b.iter(|| maxsim_score(black_box(&q), black_box(&d)).unwrap()));
}

fn bench_alignment(c: &mut Criterion) {
    let params = EncoderParams::random(VOCAB, 64, 128, 2).unwrap();
    let mut group = c.benchmark_group("greedy_align");
    for len in [8, 32, 64] {
        let t = params.encode(&tokens(len, 3)).unwrap();
        let s = params.encode(&tokens(len, 4)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(len), &len, |b, _| {
            b.iter(|| greedy_align(black_box(&t), black_box(&s)).unwrap())
        });
    }
    group.finish();
}

fn bench_search(c: &mut Criterion) {
    let params = EncoderParams::random(VOCAB, 32, 16, 3).unwrap();
    let docs: Vec<DocumentRecord> = (0..2000)
        .map(|i| DocumentRecord {
            doc_id: format!("d{i:05}"),
            token_ids: tokens(20 + i % 40, i as u32),
            surface_text: String::new(),
        })
        .collect();
    let index = build_index(&docs, &params, 180).unwrap();
    let searcher = index.searcher(&params).unwrap();
    let query = tokens(8, 99);
    c.bench_function("search 2000 docs top-10", |b| {
        b.iter(|| searcher.search(black_box(&query), 10, 32).unwrap())
    });
}

criterion_group!(benches, bench_maxsim, bench_alignment, bench_search);
criterion_main!(benches);
