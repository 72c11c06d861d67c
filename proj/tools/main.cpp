#include "cli.hpp"

int main(int argc, char** argv) { return sslecho::cli::run_cli(argc, argv); }
