use std::io::Write;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let threads = match std::env::var("OVNLM_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) => n,
            Err(_) => {
                eprintln!("error: OVNLM_THREADS must be a nonnegative integer, got {v:?}");
                std::process::exit(2);
            }
        },
        Err(_) => 0,
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: cannot start worker pool: {e}");
        std::process::exit(1);
    }

    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    let code = ovnlm::cli::run(std::env::args_os(), &mut lock);
    let _ = lock.flush();
    std::process::exit(code);
}
