#include "ctxr/cli.hpp"

int main(int argc, char** argv) { return ctxr::cli::run(argc, argv); }
