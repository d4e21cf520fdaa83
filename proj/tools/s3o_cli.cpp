#include "s3o/cli.hpp"

int main(int argc, char** argv) { return s3o::dispatch(argc, argv); }
