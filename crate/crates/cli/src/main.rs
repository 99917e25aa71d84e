use rundir_cli::{dispatch, Session};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cwd = std::env::current_dir().unwrap_or_else(|_| ".".into());
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr().lock();
    let code = {
        let mut session = Session::new(cwd, &mut out, &mut err);
        dispatch(std::env::args_os(), &mut session)
    };
    std::process::exit(code);
}
