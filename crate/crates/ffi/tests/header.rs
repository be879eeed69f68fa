use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

const EXPORTED: &[&str] = &[
    "bk_last_error",
    "bk_version",
    "bk_network_from_json",
    "bk_network_to_json",
    "bk_network_free",
    "bk_string_free",
    "bk_network_num_units",
    "bk_network_num_edges",
    "bk_network_weights",
    "bk_network_forward",
    "bk_network_cost",
    "bk_network_deficit",
    "bk_balance_neuron",
    "bk_run_balancing",
    "bk_solve_convex",
    "bk_tied_layer_closed_form",
];

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/balancekit.h")
}

#[test]
fn header_declares_every_export() {
    let text = fs::read_to_string(header()).expect("build script writes the header");
    for f in EXPORTED {
        let declared = text.contains(&format!(" {f}(")) || text.contains(&format!("*{f}("));
        assert!(declared, "{f} missing from header");
    }
    for c in ["BK_OK", "BK_NULL_POINTER", "BK_PARSE", "BK_NOT_CONVERGED", "BK_BUFFER_TOO_SMALL", "BK_INTERNAL"] {
        assert!(text.contains(&format!("#define {c} ")), "{c} missing from header");
    }
    assert!(text.contains("typedef struct BkNetwork BkNetwork;"));
    assert!(text.contains("typedef struct BkBalanceSummary"));
}

const C_CALLER: &str = r#"
#include "balancekit.h"
#include <stdio.h>

int run(const char *json) {
    BkNetwork *net = NULL;
    BkBalanceSummary summary;
    double x[2] = {0.5, -0.5}, y[1], r_star, lambda, w[64], m[2], norms[2] = {4.0, 1.0};
    size_t n_units, n_edges;
    char *text = NULL;
    if (bk_network_from_json(json, &net) != BK_OK) {
        fprintf(stderr, "%s\n", bk_last_error());
        return 1;
    }
    bk_network_num_units(net, &n_units);
    bk_network_num_edges(net, &n_edges);
    bk_network_weights(net, w, 64);
    bk_network_forward(net, x, 2, y, 1);
    bk_network_cost(net, "l2", &r_star);
    bk_network_deficit(net, "l2", &r_star);
    bk_balance_neuron(net, 3, "l2", &lambda);
    bk_run_balancing(net, "stochastic:1", "l2", 1e-10, 1000, &summary);
    bk_solve_convex(net, "l2", &r_star);
    bk_tied_layer_closed_form(norms, 2, m);
    bk_network_to_json(net, &text);
    bk_string_free(text);
    bk_network_free(net);
    return summary.converged ? 0 : (int)BK_NOT_CONVERGED;
}
"#;

#[test]
fn header_compiles_as_c_and_cxx() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("caller.c");
    fs::write(&src, C_CALLER).unwrap();
    let include = header().parent().unwrap().to_path_buf();
    for (compiler, extra) in [("cc", &["-std=c99"][..]), ("c++", &["-x", "c++"][..])] {
        let status = Command::new(compiler)
            .args(extra)
            .args(["-Wall", "-Werror", "-fsyntax-only", "-I"])
            .arg(&include)
            .arg(&src)
            .status();
        match status {
            Ok(s) => assert!(s.success(), "{compiler} rejected the header"),
            Err(e) => panic!("cannot run {compiler}: {e}"),
        }
    }
}

const C_MAIN: &str = r#"
#include <stdlib.h>
int run(const char *json);
int main(int argc, char **argv) {
    FILE *f = fopen(argv[1], "rb");
    long n;
    char *buf;
    if (!f) return 3;
    fseek(f, 0, SEEK_END);
    n = ftell(f);
    rewind(f);
    buf = calloc((size_t)n + 1, 1);
    if (fread(buf, 1, (size_t)n, f) != (size_t)n) return 4;
    fclose(f);
    return run(buf);
}
"#;

/// Links the caller against the static library and runs it on a real network.
#[test]
fn c_caller_links_and_runs() {
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libbalancekit_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    fs::write(&src, format!("#include <stdio.h>\n{C_MAIN}\n{C_CALLER}")).unwrap();
    let exe = dir.path().join("caller");
    let status = Command::new("cc")
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("cc");
    assert!(status.success(), "link failed");

    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
    let net = balancekit::netgraph::LayeredNet::new(&[2, 3, 3, 1]).build(&mut rng);
    let json = dir.path().join("net.json");
    fs::write(&json, balancekit::netgraph::serialize(&net).unwrap()).unwrap();
    let out = Command::new(&exe).arg(&json).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}
