#include "phenoscope/cli.hpp"

int main(int argc, char** argv) { return phenoscope::cli::dispatch(argc, argv); }
