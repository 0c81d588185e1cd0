#include "cmidd/cli.hpp"

int main(int argc, char** argv) { return cmidd::cli::run(argc, argv); }
