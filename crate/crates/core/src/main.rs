fn main() {
    std::process::exit(ppgconv::cli::run(std::env::args_os()));
}
