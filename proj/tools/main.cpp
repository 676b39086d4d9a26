#include <patchproto/cli.hpp>

int main(int argc, char** argv) { return patchproto::cli::dispatch(argc, argv); }
