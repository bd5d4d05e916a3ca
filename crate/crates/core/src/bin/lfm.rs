fn main() {
    lfm_core::tune_allocator();
    std::process::exit(lfm_core::diagnostics::cli::cli_main(std::env::args_os()));
}
